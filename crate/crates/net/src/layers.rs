//! Building blocks of the regression network. Each layer only holds
//! parameter ids into a [`ParamStore`], so the same layout runs on a graph of
//! any element type.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{ConvSpec, Graph, ParamId, ParamStore, Var};
use crate::tensor::{Real, Tensor};

/// Allocates named parameters with seeded initial values.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: R,
}

impl<R: Rng> Init<'_, R> {
    /// He-normal weights, scaled by `gain`.
    fn weight(&mut self, name: &str, cout: usize, cin: usize, k: usize, gain: f64) -> ParamId {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        let d = Normal::new(0.0, std).expect("positive std");
        let data = (0..cout * cin * k * k).map(|_| d.sample(&mut self.rng) as f32).collect();
        self.store.add(format!("{name}.weight"), Tensor::from_vec([cout, cin, k, k], data))
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, spec: ConvSpec, bias: bool) -> Conv {
        self.conv_gain(name, cin, cout, spec, bias, 1.0)
    }

    pub fn conv_gain(&mut self, name: &str, cin: usize, cout: usize, spec: ConvSpec, bias: bool, gain: f64) -> Conv {
        let w = self.weight(name, cout, cin, spec.kernel, gain);
        let b = bias.then(|| self.store.add(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1])));
        Conv { w, b, spec }
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.store.add(format!("{name}.gamma"), Tensor::full([c, 1, 1, 1], 1.0));
        let beta = self.store.add(format!("{name}.beta"), Tensor::zeros([c, 1, 1, 1]));
        let stats = self.store.add_norm(name, c);
        Norm { gamma, beta, stats }
    }

    /// Convolution without bias followed by normalization and ReLU.
    pub fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, spec: ConvSpec) -> ConvBn {
        ConvBn { conv: self.conv(&format!("{name}.conv"), cin, cout, spec, false), norm: self.norm(&format!("{name}.bn"), cout) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        g.conv(x, self.w, self.b, self.spec)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: usize,
}

impl Norm {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        g.norm(x, self.gamma, self.beta, self.stats)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvBn {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.norm.forward(g, y);
        g.relu(y)
    }
}

/// Stride-2 convolution then a same-size one, both normalized.
#[derive(Clone, Copy, Debug)]
pub struct DownBlock {
    pub down: ConvBn,
    pub conv: ConvBn,
}

impl DownBlock {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            down: init.conv_bn(&format!("{name}.down"), cin, cout, ConvSpec::same(3, 2, 1)),
            conv: init.conv_bn(&format!("{name}.conv"), cout, cout, ConvSpec::same(3, 1, 1)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.down.forward(g, x);
        self.conv.forward(g, y)
    }
}

/// Pre-activation residual block: `x + conv(relu(bn(conv(relu(bn(x))))))`.
#[derive(Clone, Copy, Debug)]
pub struct ResidualBlock {
    pub bn1: Norm,
    pub conv1: Conv,
    pub bn2: Norm,
    pub conv2: Conv,
}

impl ResidualBlock {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, c: usize) -> Self {
        let s = ConvSpec::same(3, 1, 1);
        Self {
            bn1: init.norm(&format!("{name}.bn1"), c),
            conv1: init.conv(&format!("{name}.conv1"), c, c, s, false),
            bn2: init.norm(&format!("{name}.bn2"), c),
            // small last conv so each block starts near the identity
            conv2: init.conv_gain(&format!("{name}.conv2"), c, c, s, false, 0.1),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.bn1.forward(g, x);
        let y = g.relu(y);
        let y = self.conv1.forward(g, y);
        let y = self.bn2.forward(g, y);
        let y = g.relu(y);
        let y = self.conv2.forward(g, y);
        g.add(x, y)
    }
}

/// Coordinate attention: features pooled along each spatial axis pass a
/// shared bottleneck, then per-axis sigmoid gates rescale the input.
#[derive(Clone, Copy, Debug)]
pub struct CoordAttention {
    pub squeeze: Conv,
    pub gate_h: Conv,
    pub gate_w: Conv,
}

impl CoordAttention {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, c: usize, reduction: usize) -> Self {
        let mid = (c / reduction).max(8);
        let p = ConvSpec::same(1, 1, 1);
        Self {
            squeeze: init.conv(&format!("{name}.squeeze"), c, mid, p, true),
            gate_h: init.conv(&format!("{name}.gate_h"), mid, c, p, true),
            gate_w: init.conv(&format!("{name}.gate_w"), mid, c, p, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let ph = g.mean_w(x);
        let pw = g.mean_h(x);
        let ah = self.squeeze.forward(g, ph);
        let ah = g.relu(ah);
        let aw = self.squeeze.forward(g, pw);
        let aw = g.relu(aw);
        let gh = self.gate_h.forward(g, ah);
        let gh = g.sigmoid(gh);
        let gw = self.gate_w.forward(g, aw);
        let gw = g.sigmoid(gw);
        let y = g.mul(x, gh);
        g.mul(y, gw)
    }
}

/// Two residual blocks and a coordinate attention block.
#[derive(Clone, Copy, Debug)]
pub struct Refinement {
    pub rb1: ResidualBlock,
    pub rb2: ResidualBlock,
    pub attention: CoordAttention,
}

impl Refinement {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, c: usize, reduction: usize) -> Self {
        Self {
            rb1: ResidualBlock::new(init, &format!("{name}.rb1"), c),
            rb2: ResidualBlock::new(init, &format!("{name}.rb2"), c),
            attention: CoordAttention::new(init, &format!("{name}.ca"), c, reduction),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.rb1.forward(g, x);
        let y = self.rb2.forward(g, y);
        self.attention.forward(g, y)
    }
}

/// Spatial pyramid: a global-average-pool path and atrous 3×3 convolutions
/// at several rates, concatenated and projected.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub pool: Conv,
    pub atrous: Vec<ConvBn>,
    pub project: ConvBn,
}

impl Pyramid {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, cin: usize, c: usize, rates: &[usize]) -> Self {
        let atrous = rates
            .iter()
            .map(|&r| init.conv_bn(&format!("{name}.rate{r}"), cin, c, ConvSpec::same(3, 1, r)))
            .collect();
        Self {
            pool: init.conv(&format!("{name}.pool"), cin, c, ConvSpec::same(1, 1, 1), true),
            atrous,
            project: init.conv_bn(&format!("{name}.project"), c * (rates.len() + 1), c, ConvSpec::same(1, 1, 1)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let [_, _, h, w] = g.value(x).shape;
        let p = g.mean_h(x);
        let p = g.mean_w(p);
        let p = self.pool.forward(g, p);
        let p = g.relu(p);
        let mut parts = vec![g.expand(p, h, w)];
        for a in &self.atrous {
            parts.push(a.forward(g, x));
        }
        let y = g.concat(&parts);
        self.project.forward(g, y)
    }
}

/// Convolution blocks ending in two linear output channels.
#[derive(Clone, Copy, Debug)]
pub struct RegressionHead {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub out: Conv,
}

impl RegressionHead {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, cin: usize, c: usize) -> Self {
        let s = ConvSpec::same(3, 1, 1);
        Self {
            conv1: init.conv_bn(&format!("{name}.conv1"), cin, c, s),
            conv2: init.conv_bn(&format!("{name}.conv2"), c, c, s),
            out: init.conv_gain(&format!("{name}.out"), c, 2, ConvSpec::same(1, 1, 1), true, 0.1),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.conv1.forward(g, x);
        let y = self.conv2.forward(g, y);
        self.out.forward(g, y)
    }
}
