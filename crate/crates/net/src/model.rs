//! The regression network: texture and orientation branches, refinement,
//! mask fusion, spatial pyramid and regression head.

use image::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dfr_core::field::{DistortionField, FieldGeometry};
use dfr_core::orientation::OrientationProbs;
use dfr_core::raster::{Mask, Resolution};

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, ParamStore, Var};
use crate::layers::{ConvBn, Conv, DownBlock, Init, Pyramid, Refinement, RegressionHead};
use crate::tensor::{Real, Tensor};

/// Downsampling blocks of the texture branch; each halves the resolution.
pub const TEXTURE_BLOCKS: usize = 4;
/// Parameter-name prefix of the orientation branch.
pub const ORIENTATION_PREFIX: &str = "orientation.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size_px: usize,
    pub block_size_px: usize,
    pub orientation_classes: usize,
    pub atrous_rates: Vec<usize>,
    pub texture_widths: Vec<usize>,
    pub orientation_widths: Vec<usize>,
    pub fusion_width: usize,
    pub pyramid_width: usize,
    pub head_width: usize,
    pub attention_reduction: usize,
    /// Spatial pyramid on; off only for the ablation.
    pub use_pyramid: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size_px: 512,
            block_size_px: 16,
            orientation_classes: 180,
            atrous_rates: vec![1, 2, 4, 8],
            texture_widths: vec![32, 64, 128, 256],
            orientation_widths: vec![64, 256, 896],
            fusion_width: 320,
            pyramid_width: 256,
            head_width: 256,
            attention_reduction: 8,
            use_pyramid: true,
        }
    }
}

impl NetworkConfig {
    /// Narrow network for desk-scale training on small inputs.
    pub fn small(input_size_px: usize) -> Self {
        Self {
            input_size_px,
            texture_widths: vec![8, 16, 32, 64],
            orientation_widths: vec![8, 16, 32],
            fusion_width: 64,
            pyramid_width: 32,
            head_width: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.block_size_px != 1 << TEXTURE_BLOCKS {
            return err(format!("block size {} px, the texture branch downsamples by {}", self.block_size_px, 1 << TEXTURE_BLOCKS));
        }
        if self.input_size_px == 0 || self.input_size_px % self.block_size_px != 0 {
            return err(format!("input size {} px is not a multiple of the {} px block", self.input_size_px, self.block_size_px));
        }
        if self.texture_widths.len() != TEXTURE_BLOCKS || self.orientation_widths.len() != 3 {
            return err(format!(
                "need {TEXTURE_BLOCKS} texture widths and 3 orientation widths, got {} and {}",
                self.texture_widths.len(),
                self.orientation_widths.len()
            ));
        }
        let heads = [self.fusion_width, self.pyramid_width, self.head_width];
        let mut widths = self.texture_widths.iter().chain(&self.orientation_widths).chain(&heads);
        if widths.any(|&w| w == 0) || self.attention_reduction == 0 || self.orientation_classes == 0 {
            return err("widths, classes and attention reduction must be positive".into());
        }
        if self.use_pyramid && (self.atrous_rates.is_empty() || self.atrous_rates.contains(&0)) {
            return err("atrous rates must be positive and nonempty".into());
        }
        Ok(())
    }

    /// Output grid cells per side.
    pub fn grid(&self) -> usize {
        self.input_size_px / self.block_size_px
    }
}

/// Without ("basic") or with ("+O") the orientation branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Basic,
    PlusO,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Basic => "basic",
            Variant::PlusO => "plus_o",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Variant::Basic),
            "plus_o" | "+o" | "+O" => Ok(Variant::PlusO),
            _ => Err(Error::InvalidArgument(format!("unknown variant {s:?} (basic, plus_o)"))),
        }
    }
}

#[derive(Clone, Debug)]
struct OrientationBranch {
    convs: [ConvBn; 3],
    refine: Refinement,
    classify: Conv,
}

#[derive(Clone, Debug)]
struct Layout {
    texture: Vec<DownBlock>,
    texture_refine: Refinement,
    orientation: Option<OrientationBranch>,
    fusion: ConvBn,
    fusion_refine: Refinement,
    pyramid: Option<Pyramid>,
    head: RegressionHead,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `N×2×g×g` displacement in pixels (dx, dy).
    pub field: Var,
    /// `N×T×g×g` per-cell class probabilities.
    pub probs: Option<Var>,
}

/// Block-resolution network output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutput {
    pub field_est: DistortionField,
    pub orientation_probs: Option<OrientationProbs>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub variant: Variant,
    pub store: ParamStore<f32>,
    layout: Layout,
}

/// Ridge pixels (dark) map to 1, background to 0.
pub fn image_tensor<T: Real>(images: &[&GrayImage]) -> Tensor<T> {
    let (w, h) = (images[0].width() as usize, images[0].height() as usize);
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        assert_eq!((img.width() as usize, img.height() as usize), (w, h), "batch images differ in size");
        data.extend(img.as_raw().iter().map(|&v| T::of(1.0 - v as f64 / 255.0)));
    }
    Tensor::from_vec([images.len(), 1, h, w], data)
}

/// Block masks as a `N×1×g×g` tensor of zeros and ones.
pub fn mask_tensor<T: Real>(masks: &[&Mask]) -> Tensor<T> {
    let (w, h) = (masks[0].width(), masks[0].height());
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        assert_eq!((m.width(), m.height()), (w, h), "batch masks differ in size");
        data.extend(m.bits.data.iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
    Tensor::from_vec([masks.len(), 1, h, w], data)
}

pub fn count_parameters<T: Real>(store: &ParamStore<T>) -> usize {
    store.count()
}

impl Model {
    /// Construct the network; parameters are a function of `seed` alone.
    pub fn build(config: NetworkConfig, variant: Variant, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let r = config.attention_reduction;
        let tw = &config.texture_widths;
        let texture = (0..TEXTURE_BLOCKS)
            .map(|i| DownBlock::new(&mut init, &format!("texture.block{i}"), if i == 0 { 1 } else { tw[i - 1] }, tw[i]))
            .collect();
        let tex_c = tw[TEXTURE_BLOCKS - 1];
        let texture_refine = Refinement::new(&mut init, "texture.refine", tex_c, r);
        let orientation = (variant == Variant::PlusO).then(|| {
            let ow = &config.orientation_widths;
            let convs = [
                init.conv_bn("orientation.conv0", 1, ow[0], ConvSpec::same(5, 4, 1)),
                init.conv_bn("orientation.conv1", ow[0], ow[1], ConvSpec::same(3, 2, 1)),
                init.conv_bn("orientation.conv2", ow[1], ow[2], ConvSpec::same(3, 2, 1)),
            ];
            let refine = Refinement::new(&mut init, "orientation.refine", ow[2], r);
            let classify = init.conv("orientation.classify", ow[2], config.orientation_classes, ConvSpec::same(1, 1, 1), true);
            OrientationBranch { convs, refine, classify }
        });
        let ori_c = orientation.as_ref().map_or(0, |_| config.orientation_widths[2]);
        let fw = config.fusion_width;
        let fusion = init.conv_bn("fusion.project", tex_c + ori_c + 1, fw, ConvSpec::same(1, 1, 1));
        let fusion_refine = Refinement::new(&mut init, "fusion.refine", fw, r);
        let pyramid = config.use_pyramid.then(|| Pyramid::new(&mut init, "pyramid", fw, config.pyramid_width, &config.atrous_rates));
        let head_in = if config.use_pyramid { config.pyramid_width } else { fw };
        let head = RegressionHead::new(&mut init, "head", head_in, config.head_width);
        let layout = Layout { texture, texture_refine, orientation, fusion, fusion_refine, pyramid, head };
        Ok(Model { config, variant, store, layout })
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.store)
    }

    /// Record the network on `g`, whose store must have this model's layout
    /// (this model's store, or a cast of it). `image` is `N×1×S×S`, `mask`
    /// the `N×1×g×g` block mask.
    pub fn run<T: Real>(&self, g: &mut Graph<T>, image: Var, mask: Var) -> Outputs {
        let l = &self.layout;
        let mut t = image;
        for b in &l.texture {
            t = b.forward(g, t);
        }
        let t = l.texture_refine.forward(g, t);
        let mut parts = vec![t];
        let mut probs = None;
        if let Some(o) = &l.orientation {
            let mut f = image;
            for c in &o.convs {
                f = c.forward(g, f);
            }
            let f = o.refine.forward(g, f);
            let logits = o.classify.forward(g, f);
            probs = Some(g.softmax(logits));
            parts.push(f);
        }
        parts.push(mask);
        let x = g.concat(&parts);
        let x = l.fusion.forward(g, x);
        let x = l.fusion_refine.forward(g, x);
        let x = match &l.pyramid {
            Some(p) => p.forward(g, x),
            None => x,
        };
        Outputs { field: l.head.forward(g, x), probs }
    }

    /// Inference on a batch already converted to tensors.
    pub fn infer_tensors(&self, image: Tensor<f32>, mask: Tensor<f32>) -> (Tensor<f32>, Option<Tensor<f32>>) {
        let mut g = Graph::new(&self.store, false);
        let i = g.input(image);
        let m = g.input(mask);
        let o = self.run(&mut g, i, m);
        (g.value(o.field).clone(), o.probs.map(|p| g.value(p).clone()))
    }

    /// Deterministic inference on one image. The mask may be at pixel
    /// resolution (area-pooled to blocks here) or already per block.
    pub fn forward(&self, skeleton: &GrayImage, mask: &Mask) -> Result<NetworkOutput> {
        let s = self.config.input_size_px;
        let bs = self.config.block_size_px;
        if (skeleton.width() as usize, skeleton.height() as usize) != (s, s) {
            return Err(Error::ShapeMismatch(format!("image is {}x{}, the network takes {s}x{s}", skeleton.width(), skeleton.height())));
        }
        let blocks = match mask.resolution {
            Resolution::Pixel if (mask.width(), mask.height()) == (s, s) => mask.to_blocks(bs as u32),
            Resolution::Block(b) if b as usize == bs && (mask.width(), mask.height()) == (s / bs, s / bs) => mask.clone(),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "mask {}x{} at {:?} does not fit a {s}x{s} input",
                    mask.width(),
                    mask.height(),
                    mask.resolution
                )))
            }
        };
        let (f, p) = self.infer_tensors(image_tensor(&[skeleton]), mask_tensor(&[&blocks]));
        Ok(NetworkOutput { field_est: field_from_tensor(&f, 0, bs), orientation_probs: p.map(|p| probs_from_tensor(&p, 0)) })
    }
}

/// Sample `n` of an `N×2×h×w` field tensor.
pub fn field_from_tensor<T: Real>(t: &Tensor<T>, n: usize, block: usize) -> DistortionField {
    let (h, w) = (t.h(), t.w());
    let s = t.sample(n);
    let conv = |v: &[T]| v.iter().map(|x| x.to_f64().expect("finite")).collect();
    DistortionField::new(FieldGeometry::new(w, h, block), conv(&s[..h * w]), conv(&s[h * w..])).expect("shapes agree")
}

pub fn field_to_tensor<T: Real>(fields: &[&DistortionField]) -> Tensor<T> {
    let g = fields[0].geometry;
    let mut data = Vec::with_capacity(fields.len() * 2 * g.len());
    for f in fields {
        assert_eq!(f.geometry, g, "batch fields differ in geometry");
        data.extend(f.dx.iter().chain(&f.dy).map(|&v| T::of(v)));
    }
    Tensor::from_vec([fields.len(), 2, g.height_blocks, g.width_blocks], data)
}

/// Sample `n` of an `N×T×h×w` probability tensor.
pub fn probs_from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> OrientationProbs {
    OrientationProbs {
        width: t.w(),
        height: t.h(),
        classes: t.c(),
        data: t.sample(n).iter().map(|x| x.to_f64().expect("finite")).collect(),
    }
}
