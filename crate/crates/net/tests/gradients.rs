//! Analytic parameter gradients of random mini-networks against central
//! differences at step 1e-5, one per block type.

use dfr_net::graph::{ConvSpec, Graph, ParamStore, Var};
use dfr_net::layers::{CoordAttention, DownBlock, Init, Pyramid, Refinement, RegressionHead, ResidualBlock};
use dfr_net::model::{Model, NetworkConfig, Variant};
use dfr_net::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-3;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Randomize every parameter (including scales and shifts) so no gradient
/// is trivially structured.
fn randomized(store: &ParamStore<f32>, seed: u64) -> ParamStore<f64> {
    let mut s = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut s.params {
        p.value.data.iter_mut().for_each(|v| *v = *v + rng.random_range(-0.3..0.3));
    }
    s
}

/// Scalar loss `Σ r ⊙ f(x)` and its parameter gradients.
fn check(store: &ParamStore<f64>, input: &Tensor<f64>, every: usize, f: &dyn Fn(&mut Graph<f64>, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    fn run<'s>(s: &'s ParamStore<f64>, input: &Tensor<f64>, f: &dyn Fn(&mut Graph<f64>, Var) -> Var) -> (Graph<'s, f64>, Var) {
        let mut g = Graph::new(s, true);
        let x = g.input(input.clone());
        let y = f(&mut g, x);
        (g, y)
    }
    let (g, y) = run(store, input, f);
    let r = random(g.value(y).shape, &mut rng);
    let grads = g.backward(vec![(y, r.clone())]);
    let loss = |s: &ParamStore<f64>| {
        let (g, y) = run(s, input, f);
        g.value(y).data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>()
    };
    let (mut num, mut ana) = (Vec::new(), Vec::new());
    let mut k = 0;
    for (pi, p) in store.params.iter().enumerate() {
        let gp = grads[pi].as_ref().unwrap_or_else(|| panic!("{} receives no gradient", p.name));
        for j in 0..p.value.numel() {
            k += 1;
            if k % every != 0 {
                continue;
            }
            let mut s = store.clone();
            s.params[pi].value.data[j] += STEP;
            let up = loss(&s);
            s.params[pi].value.data[j] -= 2.0 * STEP;
            let dn = loss(&s);
            num.push((up - dn) / (2.0 * STEP));
            ana.push(gp.data[j]);
        }
    }
    let err: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = num.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(err / scale <= TOLERANCE, "relative gradient error {} over {} entries", err / scale, num.len());
}

fn init(seed: u64) -> (ParamStore<f32>, ChaCha8Rng) {
    (ParamStore::default(), ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn residual_block() {
    let (mut s, rng) = init(1);
    let b = ResidualBlock::new(&mut Init { store: &mut s, rng }, "rb", 3);
    let x = random([2, 3, 5, 6], &mut ChaCha8Rng::seed_from_u64(2));
    check(&randomized(&s, 3), &x, 1, &|g, x| b.forward(g, x));
}

#[test]
fn coordinate_attention() {
    let (mut s, rng) = init(4);
    let b = CoordAttention::new(&mut Init { store: &mut s, rng }, "ca", 4, 2);
    let x = random([2, 4, 5, 3], &mut ChaCha8Rng::seed_from_u64(5));
    check(&randomized(&s, 6), &x, 1, &|g, x| b.forward(g, x));
}

#[test]
fn atrous_convolution() {
    let (mut s, rng) = init(7);
    let mut i = Init { store: &mut s, rng };
    let b = i.conv_bn("atrous", 3, 4, ConvSpec::same(3, 1, 2));
    let x = random([2, 3, 7, 6], &mut ChaCha8Rng::seed_from_u64(8));
    check(&randomized(&s, 9), &x, 1, &|g, x| b.forward(g, x));
}

#[test]
fn spatial_pyramid() {
    let (mut s, rng) = init(10);
    let b = Pyramid::new(&mut Init { store: &mut s, rng }, "pyr", 3, 2, &[1, 2, 4]);
    let x = random([2, 3, 6, 6], &mut ChaCha8Rng::seed_from_u64(11));
    check(&randomized(&s, 12), &x, 1, &|g, x| b.forward(g, x));
}

#[test]
fn down_refinement_and_head() {
    let (mut s, rng) = init(13);
    let mut i = Init { store: &mut s, rng };
    let d = DownBlock::new(&mut i, "down", 2, 3);
    let r = Refinement::new(&mut i, "ref", 3, 1);
    let h = RegressionHead::new(&mut i, "head", 3, 3);
    let x = random([2, 2, 8, 6], &mut ChaCha8Rng::seed_from_u64(14));
    check(&randomized(&s, 15), &x, 1, &|g, x| {
        let y = d.forward(g, x);
        let y = r.forward(g, y);
        h.forward(g, y)
    });
}

#[test]
fn whole_networks() {
    for variant in [Variant::Basic, Variant::PlusO] {
        let c = NetworkConfig {
            texture_widths: vec![2, 2, 3, 3],
            orientation_widths: vec![2, 2, 3],
            fusion_width: 3,
            pyramid_width: 2,
            head_width: 2,
            orientation_classes: 4,
            attention_reduction: 1,
            atrous_rates: vec![1, 2],
            ..NetworkConfig::small(32)
        };
        let m = Model::build(c, variant, 16).unwrap();
        let store = randomized(&m.store, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = Tensor::from_vec([2, 1, 32, 32], (0..2048).map(|_| rng.random_range(0.0..1.0)).collect());
        let mask = Tensor::from_vec([2, 1, 2, 2], vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        check(&store, &x, 3, &|g, x| {
            let k = g.input(mask.clone());
            let o = m.run(g, x, k);
            match o.probs {
                Some(p) => g.concat(&[o.field, p]),
                None => o.field,
            }
        });
    }
}
