//! Training loop: Adam with a cosine-decayed learning rate, mini-batches,
//! early stopping on the validation loss, and the single- and two-stage
//! regimes.

use std::fmt::Write as _;
use std::path::Path;

use image::GrayImage;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dfr_core::datagen::{DatasetManifest, Split};
use dfr_core::field::DistortionField;
use dfr_core::orientation::{angle_to_class, wrap_angle};
use dfr_core::raster::Mask;

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore};
use crate::losses::{total_loss, GridShape, LossComponents, LossWeights, Targets};
use crate::model::{field_to_tensor, image_tensor, mask_tensor, Model, Variant, ORIENTATION_PREFIX};
use crate::tensor::Tensor;

/// One training pair at network resolution.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub image: GrayImage,
    /// Block-resolution mask.
    pub mask: Mask,
    pub field: DistortionField,
    /// Orientation class per block.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub train: Vec<TrainSample>,
    pub valid: Vec<TrainSample>,
}

impl TrainingData {
    /// Load every entry of a dataset manifest, split as recorded.
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        let mut data = TrainingData::default();
        for e in &m.entries {
            let (s, orientation) = m.load_distorted(e)?;
            let field = s.gt_field.expect("loaded samples carry ground truth");
            let block = field.geometry.block_size_px as u32;
            let labels = orientation.angles.iter().map(|&a| angle_to_class(wrap_angle(a))).collect::<dfr_core::Result<Vec<_>>>()?;
            let t = TrainSample { id: e.id.clone(), image: s.image, mask: s.mask.to_blocks(block), field, labels };
            match e.split {
                Split::Train => data.train.push(t),
                Split::Valid => data.valid.push(t),
            }
        }
        Ok(data)
    }

    pub fn check(&self, model: &Model) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let s = model.config.input_size_px;
        let g = model.config.grid();
        for t in self.train.iter().chain(&self.valid) {
            let ok = (t.image.width() as usize, t.image.height() as usize) == (s, s)
                && (t.mask.width(), t.mask.height()) == (g, g)
                && (t.field.geometry.width_blocks, t.field.geometry.height_blocks) == (g, g)
                && t.labels.len() == g * g;
            if !ok {
                return Err(Error::ShapeMismatch(format!("sample {} does not fit a {s} px network", t.id)));
            }
            if let Some(&l) = t.labels.iter().find(|&&l| l >= model.config.orientation_classes) {
                return Err(Error::ShapeMismatch(format!("sample {} has orientation class {l}", t.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    SingleStage,
    TwoStage,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::SingleStage => "single_stage",
            Regime::TwoStage => "two_stage",
        })
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_stage" => Ok(Regime::SingleStage),
            "two_stage" => Ok(Regime::TwoStage),
            _ => Err(Error::InvalidArgument(format!("unknown regime {s:?} (single_stage, two_stage)"))),
        }
    }
}

/// Optimization schedule, read from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epoch cap of the orientation stage in the two-stage regime.
    pub stage1_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Early-stopping patience in epochs; 0 disables it.
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            stage1_epochs: 100,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0;
        if !ok {
            return Err(Error::InvalidArgument("training config needs positive epochs, batch size and learning rate, betas in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let mut s = String::new();
        for (k, v) in [
            ("epochs", self.epochs.to_string()),
            ("stage1_epochs", self.stage1_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("alpha", w.alpha.to_string()),
            ("gamma", w.gamma.to_string()),
            ("lambda_ori", w.lambda_ori.to_string()),
            ("lambda_dis", w.lambda_dis.to_string()),
            ("w_ori", w.w_ori.to_string()),
            ("w_dis", w.w_dis.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Apply `key = value` lines over `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::InvalidArgument(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        let w = &mut self.weights;
        match key {
            "epochs" => self.epochs = num(value)?,
            "stage1_epochs" => self.stage1_epochs = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "learning_rate" => self.learning_rate = num(value)?,
            "beta1" => self.beta1 = num(value)?,
            "beta2" => self.beta2 = num(value)?,
            "adam_eps" => self.adam_eps = num(value)?,
            "patience" => self.patience = num(value)?,
            "seed" => self.seed = num(value)?,
            "alpha" => w.alpha = num(value)?,
            "gamma" => w.gamma = num(value)?,
            "lambda_ori" => w.lambda_ori = num(value)?,
            "lambda_dis" => w.lambda_dis = num(value)?,
            "w_ori" => w.w_ori = num(value)?,
            "w_dis" => w.w_dis = num(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }
}

/// One row of the loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: &'static str,
    pub component: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub rows: Vec<HistoryRow>,
}

impl LossHistory {
    fn push(&mut self, epoch: usize, split: &'static str, c: &LossComponents, total: f64) {
        for (name, v) in LossComponents::NAMES.iter().zip(c.values()) {
            self.rows.push(HistoryRow { epoch, split, component: name, value: v });
        }
        self.rows.push(HistoryRow { epoch, split, component: "total", value: total });
    }

    /// Value of one series, in epoch order.
    pub fn series(&self, split: &str, component: &str) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.split == split && r.component == component).map(|r| (r.epoch, r.value)).collect()
    }

    /// CSV with `# key: value` header lines.
    pub fn to_csv(&self, header: &[(String, String)]) -> String {
        let mut s = String::new();
        for (k, v) in header {
            let _ = writeln!(s, "# {k}: {v}");
        }
        s.push_str("epoch,split,component,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.split, r.component, r.value);
        }
        s
    }
}

/// Result of [`train`]. The model holds the parameters of `best_epoch`.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: LossHistory,
    pub best_epoch: usize,
    pub best_valid_dis_reg: f64,
    pub epochs_run: usize,
    /// First epoch of the distortion stage in the two-stage regime.
    pub stage_boundary: Option<usize>,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    fn new(store: &ParamStore<f32>) -> Self {
        let zeros = || store.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], trainable: &[bool], lr: f64, c: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (lr as f32, c.adam_eps as f32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !trainable[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (p, &gj)) in store.params[i].value.data.iter_mut().zip(&g.data).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

struct Batch {
    image: Tensor<f32>,
    mask: Tensor<f32>,
    field: Vec<f64>,
    labels: Vec<usize>,
    mask_bits: Vec<bool>,
    shape: GridShape,
}

fn batch(samples: &[&TrainSample]) -> Batch {
    let images: Vec<&GrayImage> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Mask> = samples.iter().map(|s| &s.mask).collect();
    let fields: Vec<&DistortionField> = samples.iter().map(|s| &s.field).collect();
    let g = samples[0].field.geometry;
    Batch {
        image: image_tensor(&images),
        mask: mask_tensor(&masks),
        field: field_to_tensor::<f64>(&fields).data,
        labels: samples.iter().flat_map(|s| s.labels.iter().copied()).collect(),
        mask_bits: samples.iter().flat_map(|s| s.mask.bits.data.iter().copied()).collect(),
        shape: GridShape { n: samples.len(), h: g.height_blocks, w: g.width_blocks },
    }
}

struct StepResult {
    components: LossComponents,
    total: f64,
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

fn to_f32(shape: [usize; 4], v: &[f64]) -> Tensor<f32> {
    Tensor::from_vec(shape, v.iter().map(|&x| x as f32).collect())
}

struct Trainer<'a> {
    model: &'a mut Model,
    data: &'a TrainingData,
    cfg: &'a TrainConfig,
    history: LossHistory,
    epoch: usize,
}

/// What one stage optimizes and monitors.
struct Stage {
    weights: LossWeights,
    trainable: Vec<bool>,
    /// Validation component used for early stopping.
    monitor: fn(&LossComponents) -> f64,
    epochs: usize,
    stage: Option<usize>,
}

impl Trainer<'_> {
    fn evaluate(&self, samples: &[TrainSample], weights: &LossWeights) -> Result<StepResult> {
        let mut acc = LossComponents::default();
        let mut total = 0.0;
        let mut n = 0.0;
        for chunk in samples.chunks(self.cfg.batch_size) {
            let refs: Vec<&TrainSample> = chunk.iter().collect();
            let b = batch(&refs);
            let (field, probs) = self.model.infer_tensors(b.image.clone(), b.mask.clone());
            let probs = probs.map(|p| to_f64(&p));
            let targets = Targets { shape: b.shape, field: &b.field, labels: Some(&b.labels), mask: &b.mask_bits };
            let r = total_loss(&to_f64(&field), probs.as_deref(), self.model.config.orientation_classes, &targets, weights)?;
            let k = chunk.len() as f64;
            acc.ori_cla += k * r.components.ori_cla;
            acc.ori_smo += k * r.components.ori_smo;
            acc.dis_reg += k * r.components.dis_reg;
            acc.dis_smo += k * r.components.dis_smo;
            total += k * r.total;
            n += k;
        }
        let inv = 1.0 / n.max(1.0);
        Ok(StepResult {
            components: LossComponents { ori_cla: acc.ori_cla * inv, ori_smo: acc.ori_smo * inv, dis_reg: acc.dis_reg * inv, dis_smo: acc.dis_smo * inv },
            total: total * inv,
        })
    }

    fn run_stage(&mut self, st: &Stage) -> Result<(usize, f64)> {
        let n = self.data.train.len();
        let bs = self.cfg.batch_size.min(n);
        // a trailing batch of one sample has no batch statistics
        let batches_per_epoch = if n % bs == 1 && n > 1 { n / bs } else { n.div_ceil(bs) };
        let total_steps = st.epochs * batches_per_epoch;
        let mut adam = Adam::new(&self.model.store);
        let frozen_norms: Vec<bool> = self.model.store.norms.iter().map(|s| {
            let p = format!("{}.gamma", s.name);
            self.model.store.params.iter().position(|q| q.name == p).is_some_and(|i| !st.trainable[i])
        }).collect();
        let mut best = (0usize, f64::INFINITY, self.model.store.clone());
        let mut since_best = 0;
        let mut step = 0;
        for _ in 0..st.epochs {
            self.epoch += 1;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (self.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            let mut acc = LossComponents::default();
            let mut acc_total = 0.0;
            for (bi, idx) in order.chunks(bs).take(batches_per_epoch).enumerate() {
                let refs: Vec<&TrainSample> = idx.iter().map(|&i| &self.data.train[i]).collect();
                let b = batch(&refs);
                let lr = cosine_lr(self.cfg.learning_rate, step, total_steps);
                let (grads, updates, r) = {
                    let mut g = Graph::new(&self.model.store, true);
                    let xi = g.input(b.image);
                    let mi = g.input(b.mask);
                    let o = self.model.run(&mut g, xi, mi);
                    let field = g.value(o.field);
                    let probs = o.probs.map(|p| to_f64(g.value(p)));
                    let targets = Targets { shape: b.shape, field: &b.field, labels: Some(&b.labels), mask: &b.mask_bits };
                    let r = total_loss(&to_f64(field), probs.as_deref(), self.model.config.orientation_classes, &targets, &st.weights)?;
                    if !r.total.is_finite() {
                        return Err(Error::Divergence { epoch: self.epoch, step: bi });
                    }
                    let mut seeds = vec![(o.field, to_f32(field.shape, &r.field_grad))];
                    if let (Some(p), Some(pg)) = (o.probs, &r.probs_grad) {
                        seeds.push((p, to_f32(g.value(p).shape, pg)));
                    }
                    let grads = g.backward(seeds);
                    (grads, g.norm_updates().to_vec(), r)
                };
                if grads.iter().flatten().any(|t| !t.is_finite()) {
                    return Err(Error::Divergence { epoch: self.epoch, step: bi });
                }
                adam.update(&mut self.model.store, &grads, &st.trainable, lr, self.cfg);
                for (k, mean, var) in updates {
                    if !frozen_norms[k] {
                        self.model.store.norms[k].mean = mean;
                        self.model.store.norms[k].var = var;
                    }
                }
                acc.ori_cla += r.components.ori_cla;
                acc.ori_smo += r.components.ori_smo;
                acc.dis_reg += r.components.dis_reg;
                acc.dis_smo += r.components.dis_smo;
                acc_total += r.total;
                step += 1;
            }
            let inv = 1.0 / batches_per_epoch as f64;
            let train = LossComponents { ori_cla: acc.ori_cla * inv, ori_smo: acc.ori_smo * inv, dis_reg: acc.dis_reg * inv, dis_smo: acc.dis_smo * inv };
            self.history.push(self.epoch, "train", &train, acc_total * inv);
            let valid = if self.data.valid.is_empty() { None } else { Some(self.evaluate(&self.data.valid, &st.weights)?) };
            if let Some(v) = &valid {
                self.history.push(self.epoch, "valid", &v.components, v.total);
            }
            if let Some(s) = st.stage {
                self.history.rows.push(HistoryRow { epoch: self.epoch, split: "train", component: "stage", value: s as f64 });
            }
            let monitored = (st.monitor)(&valid.as_ref().map_or(train, |v| v.components));
            info!("epoch {}: train total {:.5}, monitored {:.5}", self.epoch, acc_total * inv, monitored);
            if monitored < best.1 {
                best = (self.epoch, monitored, self.model.store.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if self.cfg.patience > 0 && since_best >= self.cfg.patience {
                    info!("early stop after epoch {} (best {})", self.epoch, best.0);
                    break;
                }
            }
        }
        self.model.store = best.2;
        Ok((best.0, best.1))
    }
}

/// Train `model` in place; it ends with the parameters of the best
/// validation epoch.
///
/// `SingleStage` optimizes the whole weighted loss. `TwoStage` first
/// optimizes only the orientation terms, monitoring the validation focal
/// loss, then freezes the orientation branch and optimizes the distortion
/// terms; every epoch records its stage in the history.
pub fn train(model: &mut Model, data: &TrainingData, regime: Regime, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check(model)?;
    let all = vec![true; model.store.params.len()];
    let mut t = Trainer { model, data, cfg, history: LossHistory::default(), epoch: 0 };
    let dis_reg: fn(&LossComponents) -> f64 = |c| c.dis_reg;
    let (best_epoch, best, boundary) = match regime {
        Regime::SingleStage => {
            let (e, v) = t.run_stage(&Stage { weights: cfg.weights, trainable: all, monitor: dis_reg, epochs: cfg.epochs, stage: None })?;
            (e, v, None)
        }
        Regime::TwoStage => {
            if t.model.variant != Variant::PlusO {
                return Err(Error::InvalidArgument("two-stage training needs the orientation branch (plus_o)".into()));
            }
            let ori = LossWeights { lambda_dis: 0.0, ..cfg.weights };
            let cla: fn(&LossComponents) -> f64 = |c| c.ori_cla;
            t.run_stage(&Stage { weights: ori, trainable: all, monitor: cla, epochs: cfg.stage1_epochs, stage: Some(1) })?;
            let boundary = t.epoch + 1;
            let trainable = t.model.store.params.iter().map(|p| !p.name.starts_with(ORIENTATION_PREFIX)).collect();
            let dis = LossWeights { lambda_ori: 0.0, ..cfg.weights };
            let (e, v) = t.run_stage(&Stage { weights: dis, trainable, monitor: dis_reg, epochs: cfg.epochs, stage: Some(2) })?;
            (e, v, Some(boundary))
        }
    };
    Ok(TrainOutcome { history: t.history, best_epoch, best_valid_dis_reg: best, epochs_run: t.epoch, stage_boundary: boundary })
}
