//! Loss stack on block-resolution outputs: focal orientation loss,
//! orientation coherence loss, field regression and field smoothness, and
//! their weighted sum. Every loss returns its value together with the
//! analytic gradient with respect to the network output it reads.
//!
//! Grids are batches stored as `N×C×H×W` slices; masks and labels are
//! `N×H×W`. A cell counts in `|M|` when its mask bit is set. An empty mask
//! gives a zero loss and gradient.

use dfr_core::orientation::{class_basis, coherence, neighbourhood, OrientationProbs, COHERENCE_GUARD};

use crate::error::{Error, Result};

/// Focal-loss log clamp.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_ori: f64,
    pub lambda_dis: f64,
    pub w_ori: f64,
    pub w_dis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, gamma: 2.0, lambda_ori: 1.0, lambda_dis: 1.0, w_ori: 0.5, w_dis: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.gamma, self.lambda_ori, self.lambda_dis, self.w_ori, self.w_dis];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("loss weights must be finite".into()));
        }
        if self.gamma < 0.0 || all[2..].iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("gamma and the lambda/w weights must be nonnegative".into()));
        }
        Ok(())
    }

    /// `λ_ori (cla + w_ori·smo) + λ_dis (reg + w_dis·smo)`.
    pub fn total(&self, c: &LossComponents) -> f64 {
        self.lambda_ori * (c.ori_cla + self.w_ori * c.ori_smo) + self.lambda_dis * (c.dis_reg + self.w_dis * c.dis_smo)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub ori_cla: f64,
    pub ori_smo: f64,
    pub dis_reg: f64,
    pub dis_smo: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 4] = ["ori_cla", "ori_smo", "dis_reg", "dis_smo"];

    pub fn values(&self) -> [f64; 4] {
        [self.ori_cla, self.ori_smo, self.dis_reg, self.dis_smo]
    }
}

/// Batch and grid size of a block-resolution loss input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    fn check(&self, what: &str, len: usize, channels: usize) -> Result<()> {
        let want = self.n * channels * self.cells();
        if len != want {
            return Err(Error::ShapeMismatch(format!("{what} has {len} values, expected {want}")));
        }
        Ok(())
    }
}

/// Loss value and its gradient with respect to the scored input.
#[derive(Clone, Debug, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn masked_count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

/// `−(1/|M|) Σ_M Σ_t α (1−q)^γ log q`, `q = y p + (1−y)(1−p)`, with `y` the
/// one-hot label and `log` clamped at [`LOG_CLAMP`].
pub fn focal_orientation_loss(
    probs: &[f64],
    labels: &[usize],
    mask: &[bool],
    shape: GridShape,
    classes: usize,
    alpha: f64,
    gamma: f64,
) -> Result<Loss> {
    shape.check("probabilities", probs.len(), classes)?;
    shape.check("labels", labels.len(), 1)?;
    shape.check("mask", mask.len(), 1)?;
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::ShapeMismatch(format!("label {l} outside {classes} classes")));
    }
    let m = masked_count(mask);
    let mut grad = vec![0.0; probs.len()];
    if m == 0 {
        return Ok(Loss { value: 0.0, grad });
    }
    let hw = shape.cells();
    let inv = 1.0 / m as f64;
    let mut sum = 0.0;
    for s in 0..shape.n {
        for i in 0..hw {
            if !mask[s * hw + i] {
                continue;
            }
            let label = labels[s * hw + i];
            for t in 0..classes {
                let j = (s * classes + t) * hw + i;
                let p = probs[j];
                let (q, dq) = if t == label { (p, 1.0) } else { (1.0 - p, -1.0) };
                let lq = q.max(LOG_CLAMP).ln();
                let dlq = if q > LOG_CLAMP { 1.0 / q } else { 0.0 };
                let omq = 1.0 - q;
                let wgt = alpha * omq.powf(gamma);
                sum += wgt * lq;
                let dw = if gamma == 0.0 || lq == 0.0 { 0.0 } else { -alpha * gamma * omq.powf(gamma - 1.0) };
                grad[j] = -inv * (dw * lq + wgt * dlq) * dq;
            }
        }
    }
    Ok(Loss { value: -sum * inv, grad })
}

/// `|M| / Σ_M Coh − 1` per sample, averaged over samples with a nonempty
/// mask. Coh is the double-angle coherence over a clamp-to-edge 3×3
/// neighbourhood; guarded cells are constant 1.
pub fn orientation_coherence_loss(probs: &[f64], mask: &[bool], shape: GridShape, classes: usize) -> Result<Loss> {
    shape.check("probabilities", probs.len(), classes)?;
    shape.check("mask", mask.len(), 1)?;
    let (h, w, hw) = (shape.h, shape.w, shape.cells());
    let basis = class_basis(classes);
    let tn = classes as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut total = 0.0;
    let mut used = 0usize;
    for s in 0..shape.n {
        let sl = &probs[s * classes * hw..(s + 1) * classes * hw];
        let ms = &mask[s * hw..(s + 1) * hw];
        let m = masked_count(ms);
        if m == 0 {
            continue;
        }
        used += 1;
        let p = OrientationProbs { width: w, height: h, classes, data: sl.to_vec() };
        let coh = coherence(&p).coh;
        let c: f64 = (0..hw).filter(|&i| ms[i]).map(|i| coh[i]).sum::<f64>().max(COHERENCE_GUARD);
        total += m as f64 / c - 1.0;
        // dL/dCoh_i = −|M| / C² on masked cells
        let dcoh = -(m as f64) / (c * c);
        let (dc, ds) = dfr_core::orientation::mean_vectors(&p);
        let mut gv = vec![(0.0, 0.0); hw];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !ms[i] {
                    continue;
                }
                let (mut sc, mut ss, mut sd) = (0.0, 0.0, 0.0);
                for k in neighbourhood(x, y, w, h) {
                    sc += dc[k];
                    ss += ds[k];
                    sd += dc[k].hypot(ds[k]);
                }
                if sd < COHERENCE_GUARD {
                    continue;
                }
                let sn = sc.hypot(ss);
                for k in neighbourhood(x, y, w, h) {
                    let vn = dc[k].hypot(ds[k]);
                    let (mut gx, mut gy) = (0.0, 0.0);
                    if sn > 0.0 {
                        gx += sc / (sn * sd);
                        gy += ss / (sn * sd);
                    }
                    if vn > 0.0 {
                        gx -= sn / (sd * sd) * dc[k] / vn;
                        gy -= sn / (sd * sd) * ds[k] / vn;
                    }
                    gv[k].0 += dcoh * gx;
                    gv[k].1 += dcoh * gy;
                }
            }
        }
        let gs = &mut grad[s * classes * hw..(s + 1) * classes * hw];
        for (t, &(cs, sn)) in basis.iter().enumerate() {
            for i in 0..hw {
                gs[t * hw + i] = (gv[i].0 * cs + gv[i].1 * sn) / tn;
            }
        }
    }
    if used == 0 {
        return Ok(Loss { value: 0.0, grad });
    }
    let inv = 1.0 / used as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(Loss { value: total * inv, grad })
}

/// `(1/|M|) Σ_M ‖F_est − F_gt‖²` on `N×2×H×W` fields.
pub fn distortion_regression_loss(est: &[f64], gt: &[f64], mask: &[bool], shape: GridShape) -> Result<Loss> {
    shape.check("estimated field", est.len(), 2)?;
    shape.check("ground-truth field", gt.len(), 2)?;
    shape.check("mask", mask.len(), 1)?;
    let m = masked_count(mask);
    let mut grad = vec![0.0; est.len()];
    if m == 0 {
        return Ok(Loss { value: 0.0, grad });
    }
    let hw = shape.cells();
    let inv = 1.0 / m as f64;
    let mut sum = 0.0;
    for s in 0..shape.n {
        for i in (0..hw).filter(|&i| mask[s * hw + i]) {
            for c in 0..2 {
                let j = (s * 2 + c) * hw + i;
                let d = est[j] - gt[j];
                sum += d * d;
                grad[j] = 2.0 * d * inv;
            }
        }
    }
    Ok(Loss { value: sum * inv, grad })
}

/// `(1/|M|) Σ_M ‖∇F_x‖² + ‖∇F_y‖²` with forward differences in cell units
/// and clamp-to-edge borders (zero difference past the last row/column).
pub fn distortion_smoothness_loss(est: &[f64], mask: &[bool], shape: GridShape) -> Result<Loss> {
    shape.check("estimated field", est.len(), 2)?;
    shape.check("mask", mask.len(), 1)?;
    let m = masked_count(mask);
    let mut grad = vec![0.0; est.len()];
    if m == 0 {
        return Ok(Loss { value: 0.0, grad });
    }
    let (h, w, hw) = (shape.h, shape.w, shape.cells());
    let inv = 1.0 / m as f64;
    let mut sum = 0.0;
    for s in 0..shape.n {
        for y in 0..h {
            for x in 0..w {
                if !mask[s * hw + y * w + x] {
                    continue;
                }
                for c in 0..2 {
                    let base = (s * 2 + c) * hw;
                    let j = base + y * w + x;
                    for nb in [(x + 1 < w).then(|| j + 1), (y + 1 < h).then(|| j + w)].into_iter().flatten() {
                        let d = est[nb] - est[j];
                        sum += d * d;
                        grad[nb] += 2.0 * d * inv;
                        grad[j] -= 2.0 * d * inv;
                    }
                }
            }
        }
    }
    Ok(Loss { value: sum * inv, grad })
}

/// Block-resolution targets of a batch.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub shape: GridShape,
    /// `N×2×H×W` ground-truth field.
    pub field: &'a [f64],
    /// `N×H×W` orientation classes.
    pub labels: Option<&'a [usize]>,
    pub mask: &'a [bool],
}

/// All components, the weighted total, and the total's gradient with
/// respect to the field and (when present) the probabilities.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub components: LossComponents,
    pub total: f64,
    pub field_grad: Vec<f64>,
    pub probs_grad: Option<Vec<f64>>,
}

/// Weighted loss of one batch. Orientation terms need both probabilities
/// and labels and are zero otherwise.
pub fn total_loss(field: &[f64], probs: Option<&[f64]>, classes: usize, targets: &Targets, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let sh = targets.shape;
    let reg = distortion_regression_loss(field, targets.field, targets.mask, sh)?;
    let smo = distortion_smoothness_loss(field, targets.mask, sh)?;
    let mut c = LossComponents { dis_reg: reg.value, dis_smo: smo.value, ..Default::default() };
    let field_grad = reg.grad.iter().zip(&smo.grad).map(|(a, b)| weights.lambda_dis * (a + weights.w_dis * b)).collect();
    let mut probs_grad = None;
    if let (Some(p), Some(labels)) = (probs, targets.labels) {
        let cla = focal_orientation_loss(p, labels, targets.mask, sh, classes, weights.alpha, weights.gamma)?;
        let coh = orientation_coherence_loss(p, targets.mask, sh, classes)?;
        c.ori_cla = cla.value;
        c.ori_smo = coh.value;
        probs_grad = Some(cla.grad.iter().zip(&coh.grad).map(|(a, b)| weights.lambda_ori * (a + weights.w_ori * b)).collect());
    }
    Ok(LossReport { components: c, total: weights.total(&c), field_grad, probs_grad })
}
