//! Reverse-mode automatic differentiation over a tape of tensor ops.
//!
//! A [`Graph`] borrows the parameter store, records every op of one forward
//! pass together with its output, and runs the chain rule back over the
//! tape in [`Graph::backward`]. Convolutions run per sample through
//! im2col and a matrix product; samples are spread over the data-parallel
//! pool and their weight gradients are reduced in sample order, so results
//! do not depend on scheduling.

use dfr_core::par;

use crate::tensor::{Real, Tensor};

pub type ParamId = usize;

/// A trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// All parameters and normalization statistics of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
    pub norms: Vec<NormStats<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        self.params.len() - 1
    }

    pub fn add_norm(&mut self, name: impl Into<String>, channels: usize) -> usize {
        self.norms.push(NormStats { name: name.into(), mean: vec![T::zero(); channels], var: vec![T::one(); channels] });
        self.norms.len() - 1
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.to_f64().expect("finite"))).collect();
        ParamStore {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
            norms: self
                .norms
                .iter()
                .map(|s| NormStats { name: s.name.clone(), mean: conv(&s.mean), var: conv(&s.var) })
                .collect(),
        }
    }
}

/// Handle of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Odd square kernel, same-size output at stride 1.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self { kernel, stride, pad: dilation * (kernel - 1) / 2, dilation }
    }

    fn out(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

enum Op<T> {
    Input,
    Conv { x: Var, w: ParamId, b: Option<ParamId>, spec: ConvSpec },
    Norm { x: Var, gamma: ParamId, beta: ParamId, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    /// Second operand broadcast over unit H or W.
    Mul(Var, Var),
    Concat(Vec<Var>),
    MeanW(Var),
    MeanH(Var),
    Expand(Var),
    Softmax(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// One forward pass. `training` selects batch statistics in normalization
/// layers; the running-statistic updates are collected and applied by
/// [`Graph::norm_updates`].
pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    pub training: bool,
    nodes: Vec<Node<T>>,
    updates: Vec<(usize, Vec<T>, Vec<T>)>,
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, s: &ConvSpec, ho: usize, wo: usize) -> Vec<T> {
    let k = s.kernel;
    let p = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * s.stride + ki * s.dilation) as isize - s.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * s.stride + kj * s.dilation) as isize - s.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, s: &ConvSpec, ho: usize, wo: usize, dx: &mut [T]) {
    let k = s.kernel;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * s.stride + ki * s.dilation) as isize - s.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s.stride + kj * s.dilation) as isize - s.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>, training: bool) -> Self {
        Self { store, training, nodes: Vec::new(), updates: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.store.params[id].value
    }

    /// Running-statistic updates from batch-normalized layers, as
    /// `(norm index, new mean, new variance)`.
    pub fn norm_updates(&self) -> &[(usize, Vec<T>, Vec<T>)] {
        &self.updates
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn conv(&mut self, x: Var, w: ParamId, b: Option<ParamId>, spec: ConvSpec) -> Var {
        let xv = self.value(x);
        let wv = self.param(w);
        let [n, c, h, wd] = xv.shape;
        let [co, ci, kh, kw] = wv.shape;
        assert!(ci == c && kh == spec.kernel && kw == spec.kernel, "conv weight {:?} for input {:?}", wv.shape, xv.shape);
        let (ho, wo) = (spec.out(h), spec.out(wd));
        let p = ho * wo;
        let kk = c * kh * kw;
        let bias = b.map(|b| &self.param(b).data);
        let outs = par::map_range(n, |s| {
            let xs = xv.sample(s);
            let owned;
            let cols: &[T] = if spec.pointwise() {
                xs
            } else {
                owned = im2col(xs, c, h, wd, &spec, ho, wo);
                &owned
            };
            let mut out = vec![T::zero(); co * p];
            T::gemm(co, kk, p, &wv.data, false, cols, false, &mut out, false);
            if let Some(bias) = bias {
                for (o, row) in out.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[o]);
                }
            }
            out
        });
        let value = Tensor::from_vec([n, co, ho, wo], outs.concat());
        self.push(value, Op::Conv { x, w, b, spec })
    }

    /// Per-channel normalization with learned scale and shift. Uses batch
    /// statistics in training mode and the running ones otherwise.
    pub fn norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: usize) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape;
        let hw = h * w;
        let m = (n * hw) as f64;
        let eps = T::of(NORM_EPS);
        let (mean, var) = if self.training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let it = || (0..n).flat_map(move |s| xv.data[(s * c + ch) * hw..][..hw].iter());
                let mu = it().map(|v| v.to_f64().unwrap()).sum::<f64>() / m;
                let va = it().map(|v| (v.to_f64().unwrap() - mu).powi(2)).sum::<f64>() / m;
                mean[ch] = T::of(mu);
                var[ch] = T::of(va);
            }
            (mean, var)
        } else {
            let s = &self.store.norms[stats];
            (s.mean.clone(), s.var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = &self.param(gamma).data;
        let bt = &self.param(beta).data;
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xv.data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        if self.training {
            let mo = T::of(NORM_MOMENTUM);
            let run = &self.store.norms[stats];
            let upd = |r: &[T], b: &[T]| -> Vec<T> { r.iter().zip(b).map(|(&r, &b)| (T::one() - mo) * r + mo * b).collect() };
            self.updates.push((stats, upd(&run.mean, &mean), upd(&run.var, &var)));
        }
        let batch = self.training;
        self.push(Tensor::from_vec([n, c, h, w], out), Op::Norm { x, gamma, beta, xhat, inv_std, batch })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| *a = a.max(T::zero()));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| *a = T::one() / (T::one() + (-*a).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// `a ⊙ b` with `b` of shape `N×C×(H|1)×(W|1)`.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, c, h, w] = av.shape;
        let [bn, bc, bh, bw] = bv.shape;
        assert!(bn == n && bc == c && (bh == h || bh == 1) && (bw == w || bw == 1), "cannot broadcast {:?} to {:?}", bv.shape, av.shape);
        let mut out = av.clone();
        for s in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let i = ((s * c + ch) * h + y) * w + x;
                        out.data[i] = out.data[i] * bv.at(s, ch, if bh == 1 { 0 } else { y }, if bw == 1 { 0 } else { x });
                    }
                }
            }
        }
        self.push(out, Op::Mul(a, b))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape;
        let [n, _, h, w] = first;
        let mut c_total = 0;
        for &p in parts {
            let s = self.value(p).shape;
            assert!(s[0] == n && s[2] == h && s[3] == w, "concat of {:?} and {:?}", first, s);
            c_total += s[1];
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for s in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(s));
            }
        }
        self.push(Tensor::from_vec([n, c_total, h, w], data), Op::Concat(parts.to_vec()))
    }

    /// Mean over the width axis, keeping it as size 1.
    pub fn mean_w(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = v.shape;
        let inv = T::of(1.0 / w as f64);
        let data = v.data.chunks(w).map(|row| row.iter().copied().sum::<T>() * inv).collect();
        self.push(Tensor::from_vec([n, c, h, 1], data), Op::MeanW(x))
    }

    /// Mean over the height axis, keeping it as size 1.
    pub fn mean_h(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = v.shape;
        let inv = T::of(1.0 / h as f64);
        let mut data = vec![T::zero(); n * c * w];
        for (plane, out) in v.data.chunks(h * w).zip(data.chunks_mut(w)) {
            for row in plane.chunks(w) {
                out.iter_mut().zip(row).for_each(|(o, &r)| *o += r);
            }
            out.iter_mut().for_each(|o| *o = *o * inv);
        }
        self.push(Tensor::from_vec([n, c, 1, w], data), Op::MeanH(x))
    }

    /// Broadcast an `N×C×1×1` tensor to `N×C×h×w`.
    pub fn expand(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = self.value(x);
        let [n, c, one_h, one_w] = v.shape;
        assert!(one_h == 1 && one_w == 1, "expand needs a 1×1 map, got {:?}", v.shape);
        let data = v.data.iter().flat_map(|&a| std::iter::repeat_n(a, h * w)).collect();
        self.push(Tensor::from_vec([n, c, h, w], data), Op::Expand(x))
    }

    /// Softmax over channels at every position.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = v.shape;
        let hw = h * w;
        let mut out = v.clone();
        for s in 0..n {
            let d = &mut out.data[s * c * hw..(s + 1) * c * hw];
            for i in 0..hw {
                let mx = (0..c).map(|t| d[t * hw + i]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for t in 0..c {
                    let e = (d[t * hw + i] - mx).exp();
                    d[t * hw + i] = e;
                    z += e;
                }
                for t in 0..c {
                    d[t * hw + i] = d[t * hw + i] / z;
                }
            }
        }
        self.push(out, Op::Softmax(x))
    }

    /// Chain rule from the given output gradients back to every parameter.
    /// Returns one gradient per parameter of the store, `None` for
    /// parameters the seeds do not depend on.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Vec<Option<Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor<T>>> = (0..self.store.params.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape, self.value(v).shape, "seed gradient shape");
            accumulate(&mut grads[v.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Conv { x, w, b, spec } => {
                    let (dx, dw, db) = self.conv_backward(*x, *w, b.is_some(), spec, &g);
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut pgrads[*w], dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut pgrads[*b], db);
                    }
                }
                Op::Norm { x, gamma, beta, xhat, inv_std, batch } => {
                    let [n, c, h, w] = g.shape;
                    let hw = h * w;
                    let m = T::of((n * hw) as f64);
                    let gm = &self.param(*gamma).data;
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for j in base..base + hw {
                                dgamma[ch] += g.data[j] * xhat[j];
                                dbeta[ch] += g.data[j];
                            }
                        }
                    }
                    let mut dx = vec![T::zero(); g.numel()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k = gm[ch] * inv_std[ch];
                            for j in base..base + hw {
                                dx[j] = if *batch {
                                    k * (g.data[j] - (dbeta[ch] + xhat[j] * dgamma[ch]) / m)
                                } else {
                                    k * g.data[j]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(g.shape, dx));
                    accumulate(&mut pgrads[*gamma], Tensor::from_vec([c, 1, 1, 1], dgamma));
                    accumulate(&mut pgrads[*beta], Tensor::from_vec([c, 1, 1, 1], dbeta));
                }
                Op::Relu(x) => {
                    let mut d = g;
                    for (d, &y) in d.data.iter_mut().zip(&node.value.data) {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    for (d, &y) in d.data.iter_mut().zip(&node.value.data) {
                        *d = *d * y * (T::one() - y);
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let [n, c, h, w] = av.shape;
                    let [_, _, bh, bw] = bv.shape;
                    let mut da = g.clone();
                    let mut db = Tensor::zeros(bv.shape);
                    for s in 0..n {
                        for ch in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    let i = ((s * c + ch) * h + y) * w + x;
                                    let (by, bx) = (if bh == 1 { 0 } else { y }, if bw == 1 { 0 } else { x });
                                    let bi = ((s * c + ch) * bh + by) * bw + bx;
                                    da.data[i] = g.data[i] * bv.data[bi];
                                    db.data[bi] += g.data[i] * av.data[i];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Concat(parts) => {
                    let [n, _, h, w] = g.shape;
                    let sl = g.sample_len();
                    let mut offset = 0;
                    for p in parts {
                        let ps = self.value(*p).shape;
                        let len = ps[1] * h * w;
                        let mut d = Vec::with_capacity(n * len);
                        for s in 0..n {
                            d.extend_from_slice(&g.data[s * sl + offset..][..len]);
                        }
                        offset += len;
                        accumulate(&mut grads[p.0], Tensor::from_vec(ps, d));
                    }
                }
                Op::MeanW(x) => {
                    let s = self.value(*x).shape;
                    let inv = T::of(1.0 / s[3] as f64);
                    let d = g.data.iter().flat_map(|&v| std::iter::repeat_n(v * inv, s[3])).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(s, d));
                }
                Op::MeanH(x) => {
                    let s = self.value(*x).shape;
                    let (h, w) = (s[2], s[3]);
                    let inv = T::of(1.0 / h as f64);
                    let mut d = Vec::with_capacity(s.iter().product());
                    for row in g.data.chunks(w) {
                        for _ in 0..h {
                            d.extend(row.iter().map(|&v| v * inv));
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(s, d));
                }
                Op::Expand(x) => {
                    let s = self.value(*x).shape;
                    let hw = g.h() * g.w();
                    let d = g.data.chunks(hw).map(|c| c.iter().copied().sum::<T>()).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(s, d));
                }
                Op::Softmax(x) => {
                    let [n, c, h, w] = g.shape;
                    let hw = h * w;
                    let y = &node.value.data;
                    let mut d = vec![T::zero(); g.numel()];
                    for s in 0..n {
                        let base = s * c * hw;
                        for i in 0..hw {
                            let dot: T = (0..c).map(|t| g.data[base + t * hw + i] * y[base + t * hw + i]).sum();
                            for t in 0..c {
                                let j = base + t * hw + i;
                                d[j] = y[j] * (g.data[j] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(g.shape, d));
                }
            }
        }
        pgrads
    }

    fn conv_backward(
        &self,
        x: Var,
        w: ParamId,
        has_bias: bool,
        spec: &ConvSpec,
        g: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
        let xv = self.value(x);
        let wv = self.param(w);
        let [n, c, h, wd] = xv.shape;
        let [co, _, kh, kw] = wv.shape;
        let (ho, wo) = (g.h(), g.w());
        let p = ho * wo;
        let kk = c * kh * kw;
        let parts = par::map_range(n, |s| {
            let xs = xv.sample(s);
            let gs = g.sample(s);
            let owned;
            let cols: &[T] = if spec.pointwise() {
                xs
            } else {
                owned = im2col(xs, c, h, wd, spec, ho, wo);
                &owned
            };
            let mut dw = vec![T::zero(); co * kk];
            T::gemm(co, p, kk, gs, false, cols, true, &mut dw, false);
            let mut dcols = vec![T::zero(); kk * p];
            T::gemm(kk, co, p, &wv.data, true, gs, false, &mut dcols, false);
            let dx = if spec.pointwise() {
                dcols
            } else {
                let mut dx = vec![T::zero(); c * h * wd];
                col2im(&dcols, c, h, wd, spec, ho, wo, &mut dx);
                dx
            };
            let db: Vec<T> = if has_bias { gs.chunks(p).map(|r| r.iter().copied().sum()).collect() } else { Vec::new() };
            (dx, dw, db)
        });
        let mut dx = Vec::with_capacity(xv.numel());
        let mut dw = vec![T::zero(); co * kk];
        let mut db = vec![T::zero(); if has_bias { co } else { 0 }];
        for (x_s, w_s, b_s) in parts {
            dx.extend_from_slice(&x_s);
            dw.iter_mut().zip(&w_s).for_each(|(a, &b)| *a += b);
            db.iter_mut().zip(&b_s).for_each(|(a, &b)| *a += b);
        }
        (
            Tensor::from_vec(xv.shape, dx),
            Tensor::from_vec(wv.shape, dw),
            has_bias.then(|| Tensor::from_vec([co, 1, 1, 1], db)),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct convolution for the oracle.
    fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: ConvSpec) -> Tensor<f64> {
        let [n, c, h, wd] = x.shape;
        let [co, _, k, _] = w.shape;
        let (ho, wo) = (s.out(h), s.out(wd));
        let mut out = Tensor::zeros([n, co, ho, wo]);
        for ns in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s.stride + ki * s.dilation) as i64 - s.pad as i64;
                                    let ix = (ox * s.stride + kj * s.dilation) as i64 - s.pad as i64;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.at(o, ci, ki, kj) * x.at(ns, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.data[((ns * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in [ConvSpec::same(3, 1, 1), ConvSpec::same(3, 2, 1), ConvSpec::same(3, 1, 2), ConvSpec::same(1, 1, 1), ConvSpec::same(5, 4, 1)] {
            let x = random([2, 3, 9, 8], &mut rng);
            let w = random([4, 3, spec.kernel, spec.kernel], &mut rng);
            let b = random([4, 1, 1, 1], &mut rng);
            let mut store = ParamStore::default();
            let wi = store.add("w", w.clone());
            let bi = store.add("b", b.clone());
            let mut g = Graph::new(&store, true);
            let xi = g.input(x.clone());
            let y = g.conv(xi, wi, Some(bi), spec);
            let want = conv_direct(&x, &w, &b.data, spec);
            assert_eq!(g.value(y).shape, want.shape);
            for (a, b) in g.value(y).data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Scalar loss `Σ r ⊙ y` over a small graph of every op, checked
    /// against central differences in every parameter.
    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let w1 = store.add("w1", random([4, 2, 3, 3], &mut rng));
        let gm = store.add("g", random([4, 1, 1, 1], &mut rng));
        let bt = store.add("bt", random([4, 1, 1, 1], &mut rng));
        let nrm = store.add_norm("n", 4);
        let w2 = store.add("w2", random([4, 4, 3, 3], &mut rng));
        let w3 = store.add("w3", random([4, 4, 1, 1], &mut rng));
        let w4 = store.add("w4", random([3, 12, 1, 1], &mut rng));
        let b4 = store.add("b4", random([3, 1, 1, 1], &mut rng));
        let x = random([2, 2, 6, 5], &mut rng);
        let r = random([2, 3, 3, 3], &mut rng);
        let loss = |store: &ParamStore<f64>, grads: bool| {
            let mut g = Graph::new(store, true);
            let xi = g.input(x.clone());
            let a = g.conv(xi, w1, None, ConvSpec::same(3, 2, 1));
            let a = g.norm(a, gm, bt, nrm);
            let a = g.relu(a);
            let d = g.conv(a, w2, None, ConvSpec::same(3, 1, 2));
            let s = g.sigmoid(d);
            let ph = g.mean_w(a);
            let pw = g.mean_h(a);
            let ph = g.conv(ph, w3, None, ConvSpec::same(1, 1, 1));
            let ph = g.sigmoid(ph);
            let m1 = g.mul(s, ph);
            let m2 = g.mul(m1, pw);
            let sum = g.add(m2, a);
            let gp = g.mean_h(sum);
            let gp = g.mean_w(gp);
            let [_, _, h, w] = g.value(sum).shape;
            let gp = g.expand(gp, h, w);
            let cat = g.concat(&[sum, gp, d]);
            let out = g.conv(cat, w4, Some(b4), ConvSpec::same(1, 1, 1));
            let out = g.softmax(out);
            let v = g.value(out);
            let l: f64 = v.data.iter().zip(&r.data).map(|(a, b)| a * b).sum();
            let pg = if grads { g.backward(vec![(out, r.clone())]) } else { Vec::new() };
            (l, pg)
        };
        let (_, pg) = loss(&store, true);
        let h = 1e-5;
        for (pi, grad) in pg.iter().enumerate() {
            let grad = grad.as_ref().expect("every parameter is used");
            let mut num = Vec::new();
            for j in 0..store.params[pi].value.numel() {
                let mut s = store.clone();
                s.params[pi].value.data[j] += h;
                let up = loss(&s, false).0;
                s.params[pi].value.data[j] -= 2.0 * h;
                let dn = loss(&s, false).0;
                num.push((up - dn) / (2.0 * h));
            }
            let err: f64 = num.iter().zip(&grad.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            assert!(err / scale < 1e-6, "{}: relative error {}", store.params[pi].name, err / scale);
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut store = ParamStore::<f64>::default();
        let gm = store.add("g", Tensor::full([1, 1, 1, 1], 2.0));
        let bt = store.add("b", Tensor::full([1, 1, 1, 1], 0.5));
        let s = store.add_norm("n", 1);
        store.norms[s].mean = vec![1.0];
        store.norms[s].var = vec![4.0 - NORM_EPS];
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::from_vec([1, 1, 1, 2], vec![3.0, -1.0]));
        let y = g.norm(x, gm, bt, s);
        assert!((g.value(y).data[0] - 2.5).abs() < 1e-12 && (g.value(y).data[1] + 1.5).abs() < 1e-12);
        assert!(g.norm_updates().is_empty());
        let mut g = Graph::new(&store, true);
        let x = g.input(Tensor::from_vec([1, 1, 1, 2], vec![3.0, -1.0]));
        g.norm(x, gm, bt, s);
        let (_, m, v) = &g.norm_updates()[0];
        assert!((m[0] - 1.0).abs() < 1e-12 && (v[0] - (0.9 * (4.0 - NORM_EPS) + 0.4)).abs() < 1e-9);
    }
}
