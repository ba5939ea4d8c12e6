//! Frozen convolutional backbones.
//!
//! Two builders ship in the default registry:
//!
//! * `vgg19`: the VGG-19 feature stack, weights loaded from a safetensors file
//!   using torchvision's `features.<index>.{weight,bias}` names. Inputs are
//!   normalized with the ImageNet channel statistics.
//! * `random`: a narrow seeded stack with one or more 3x3 convolutions per
//!   stage, He-scaled random filters and zero biases. It has the same tap/stride layout
//!   and is what desk-scale runs use when no pretrained weights are around.
//!
//! Both are instances of [`ConvStack`], which implements [`Backbone`].

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{LayerEntry, LayerSpec};
use super::FeatureMap;
use crate::container::{Container, Precision};
use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Avg,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: String,
    /// Stage widths for `random`. Ignored by `vgg19`.
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub seed: u64,
    pub weights: Option<PathBuf>,
    pub pooling: Pooling,
    /// Subtract 0.5 from pixels before the first convolution (`random` only).
    pub centered: bool,
    /// Tapped layers; `None` selects the canonical first-conv-per-stage taps.
    pub layers: Option<Vec<String>>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// The narrow seeded backbone used for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            kind: "random".into(),
            widths: vec![16, 32, 64, 128, 128],
            convs_per_stage: 1,
            seed: 0,
            weights: None,
            pooling: Pooling::Avg,
            centered: true,
            layers: None,
        }
    }

    pub fn random(widths: &[usize], seed: u64) -> Self {
        Self {
            widths: widths.to_vec(),
            seed,
            ..Self::desk()
        }
    }

    pub fn vgg19(weights: impl Into<PathBuf>) -> Self {
        Self {
            kind: "vgg19".into(),
            widths: Vec::new(),
            weights: Some(weights.into()),
            ..Self::desk()
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Backbone>> {
        backbone_registry().get(&self.kind)?.build(self)
    }
}

/// A frozen feature extractor exposing named ReLU taps.
pub trait Backbone: Send + Sync {
    fn id(&self) -> &str;
    fn config(&self) -> &BackboneConfig;
    /// Layers extracted by default, with channel widths and strides.
    fn layer_spec(&self) -> &LayerSpec;
    /// Every tappable layer in network order.
    fn available_layers(&self) -> &[LayerEntry];
    /// Feature maps for `layers`, in the order requested.
    fn forward(&self, image: ArrayView3<f64>, layers: &[String]) -> Result<Vec<FeatureMap>>;
    /// Pulls a cotangent on the tapped features back to the pixels.
    ///
    /// `cotangent` receives the features of `layers` and returns one gradient
    /// per layer with the same `(channels, positions)` shape.
    fn vjp(
        &self,
        image: ArrayView3<f64>,
        layers: &[String],
        cotangent: &mut dyn FnMut(&[FeatureMap]) -> Result<Vec<Array2<f64>>>,
    ) -> Result<Array3<f64>>;
}

pub trait BackboneBuilder: Send + Sync {
    fn build(&self, config: &BackboneConfig) -> Result<Arc<dyn Backbone>>;
}

pub fn backbone_registry() -> Registry<dyn BackboneBuilder> {
    let mut reg: Registry<dyn BackboneBuilder> = Registry::new("backbone");
    reg.register("random", Box::new(RandomBuilder));
    reg.register("vgg19", Box::new(Vgg19Builder));
    reg
}

struct RandomBuilder;
struct Vgg19Builder;

impl BackboneBuilder for RandomBuilder {
    fn build(&self, config: &BackboneConfig) -> Result<Arc<dyn Backbone>> {
        if config.widths.is_empty() {
            return Err(Error::EmptyLayerSpec);
        }
        if config.convs_per_stage == 0 {
            return Err(Error::InvalidConfig("convs_per_stage must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (stage, &width) in config.widths.iter().enumerate() {
            if stage > 0 {
                blocks.push(Block::Pool);
            }
            for k in 0..config.convs_per_stage {
                let std = (2.0 / (c_in * 9) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let weight = Array2::from_shape_fn((width, c_in * 9), |_| normal.sample(&mut rng));
                blocks.push(Block::Conv(Conv {
                    weight,
                    bias: Array1::zeros(width),
                }));
                blocks.push(Block::Relu(format!("relu{}_{}", stage + 1, k + 1)));
                c_in = width;
            }
        }
        let id = format!(
            "random-w{}-k{}-s{}-{}{}",
            config
                .widths
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("."),
            config.convs_per_stage,
            config.seed,
            match config.pooling {
                Pooling::Avg => "avg",
                Pooling::Max => "max",
            },
            if config.centered { "-c" } else { "" },
        );
        let preprocess = if config.centered {
            Preprocess::shift([0.5; 3])
        } else {
            Preprocess::identity()
        };
        Ok(Arc::new(ConvStack::new(id, config.clone(), blocks, preprocess)?))
    }
}

/// VGG-19 configuration: channel widths, `0` marks a pooling layer.
const VGG19_PLAN: [usize; 20] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512,
];

/// `(layer name, torchvision feature index, c_in, c_out)` for each VGG-19 conv.
pub fn vgg19_convs() -> Vec<(String, usize, usize, usize)> {
    let mut out = Vec::new();
    let (mut index, mut stage, mut k, mut c_in) = (0, 1, 1, 3);
    for &width in VGG19_PLAN.iter() {
        if width == 0 {
            index += 1;
            stage += 1;
            k = 1;
            continue;
        }
        out.push((format!("relu{stage}_{k}"), index, c_in, width));
        index += 2;
        k += 1;
        c_in = width;
    }
    out
}

/// Random He-scaled weights in the torchvision VGG-19 layout, for tests and
/// smoke runs of the `vgg19` builder.
pub fn vgg19_random_weights(seed: u64) -> Container {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Container::new();
    for (_, index, c_in, c_out) in vgg19_convs() {
        let normal = Normal::new(0.0, (2.0 / (c_in * 9) as f64).sqrt()).unwrap();
        let w = ndarray::ArrayD::from_shape_fn(vec![c_out, c_in, 3, 3], |_| normal.sample(&mut rng));
        c.insert(format!("features.{index}.weight"), Precision::F32, w);
        c.insert(
            format!("features.{index}.bias"),
            Precision::F32,
            ndarray::ArrayD::zeros(vec![c_out]),
        );
    }
    c
}

impl BackboneBuilder for Vgg19Builder {
    fn build(&self, config: &BackboneConfig) -> Result<Arc<dyn Backbone>> {
        let path = config
            .weights
            .as_ref()
            .ok_or_else(|| Error::BackboneWeights("vgg19 requires a weights file".into()))?;
        let weights = Container::load(path)
            .map_err(|e| Error::BackboneWeights(format!("{}: {e}", path.display())))?;
        let taps: Vec<String> = config.layers.clone().unwrap_or_else(|| {
            (1..=5).map(|s| format!("relu{s}_1")).collect()
        });
        let convs = vgg19_convs();
        let deepest = taps
            .iter()
            .map(|t| {
                convs
                    .iter()
                    .position(|(name, ..)| name == t)
                    .ok_or_else(|| Error::InvalidConfig(format!("vgg19 has no layer '{t}'")))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .ok_or(Error::EmptyLayerSpec)?;

        let mut blocks = Vec::new();
        let mut prev_stage = 1;
        for (name, index, c_in, c_out) in convs.into_iter().take(deepest + 1) {
            let stage: usize = name[4..name.find('_').unwrap()].parse().unwrap();
            if stage != prev_stage {
                blocks.push(Block::Pool);
                prev_stage = stage;
            }
            let w = weights
                .get(&format!("features.{index}.weight"))
                .map_err(|e| Error::BackboneWeights(e.to_string()))?;
            let b = weights
                .get(&format!("features.{index}.bias"))
                .map_err(|e| Error::BackboneWeights(e.to_string()))?;
            if w.shape() != [c_out, c_in, 3, 3] || b.shape() != [c_out] {
                return Err(Error::BackboneWeights(format!(
                    "features.{index} has shape {:?}/{:?}, expected [{c_out}, {c_in}, 3, 3]/[{c_out}]",
                    w.shape(),
                    b.shape()
                )));
            }
            if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::BackboneWeights(format!("features.{index} has non-finite values")));
            }
            let weight = Array2::from_shape_vec((c_out, c_in * 9), w.iter().copied().collect())
                .expect("shape checked above");
            let bias = Array1::from_iter(b.iter().copied());
            blocks.push(Block::Conv(Conv { weight, bias }));
            blocks.push(Block::Relu(name));
        }
        let pooling = match config.pooling {
            Pooling::Avg => "avg",
            Pooling::Max => "max",
        };
        let id = format!("vgg19-{pooling}");
        Ok(Arc::new(ConvStack::new(
            id,
            config.clone(),
            blocks,
            Preprocess {
                mean: [0.485, 0.456, 0.406],
                std: [0.229, 0.224, 0.225],
            },
        )?))
    }
}

#[derive(Debug, Clone)]
struct Conv {
    /// `(c_out, c_in * 9)`, columns ordered `(c_in, ky, kx)`.
    weight: Array2<f64>,
    bias: Array1<f64>,
}

#[derive(Debug, Clone)]
enum Block {
    Conv(Conv),
    Relu(String),
    Pool,
}

#[derive(Debug, Clone, Copy)]
struct Preprocess {
    mean: [f64; 3],
    std: [f64; 3],
}

impl Preprocess {
    fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
    fn shift(mean: [f64; 3]) -> Self {
        Self {
            mean,
            std: [1.0; 3],
        }
    }
}

/// Sequential 3x3 conv / ReLU / 2x2 pooling network with frozen weights.
pub struct ConvStack {
    id: String,
    config: BackboneConfig,
    blocks: Vec<Block>,
    preprocess: Preprocess,
    available: Vec<LayerEntry>,
    spec: LayerSpec,
}

enum Saved {
    None,
    ReluOut(Array3<f64>),
    PoolIn(Array3<f64>),
    PoolShape((usize, usize, usize)),
}

impl ConvStack {
    fn new(
        id: String,
        config: BackboneConfig,
        blocks: Vec<Block>,
        preprocess: Preprocess,
    ) -> Result<Self> {
        let mut available = Vec::new();
        let mut stride = 1;
        let mut channels = 3;
        for block in &blocks {
            match block {
                Block::Conv(c) => channels = c.weight.nrows(),
                Block::Pool => stride *= 2,
                Block::Relu(name) => available.push(LayerEntry {
                    id: name.clone(),
                    channels,
                    downsample: stride,
                }),
            }
        }
        let chosen: Vec<String> = match &config.layers {
            Some(layers) => layers.clone(),
            None => available
                .iter()
                .filter(|e| e.id.ends_with("_1"))
                .map(|e| e.id.clone())
                .collect(),
        };
        let layers = chosen
            .iter()
            .map(|name| {
                available
                    .iter()
                    .find(|e| &e.id == name)
                    .cloned()
                    .ok_or_else(|| Error::InvalidConfig(format!("backbone has no layer '{name}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = LayerSpec::new(id.clone(), layers)?;
        Ok(Self {
            id,
            config,
            blocks,
            preprocess,
            available,
            spec,
        })
    }

    fn plan(&self, layers: &[String]) -> Result<(Vec<usize>, usize)> {
        if layers.is_empty() {
            return Err(Error::EmptyLayerSpec);
        }
        let mut tap_blocks = Vec::with_capacity(layers.len());
        for name in layers {
            let idx = self
                .blocks
                .iter()
                .position(|b| matches!(b, Block::Relu(n) if n == name))
                .ok_or_else(|| Error::DimensionMismatch(format!("backbone has no layer '{name}'")))?;
            tap_blocks.push(idx);
        }
        let last = *tap_blocks.iter().max().expect("non-empty");
        Ok((tap_blocks, last))
    }

    fn check_size(&self, image: ArrayView3<f64>, last: usize) -> Result<()> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::DimensionMismatch(format!("image has {c} channels")));
        }
        let pools = self.blocks[..=last]
            .iter()
            .filter(|b| matches!(b, Block::Pool))
            .count();
        let stride = 1usize << pools;
        if h < stride || w < stride {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                stride,
            });
        }
        Ok(())
    }

    fn input(&self, image: ArrayView3<f64>) -> Array3<f64> {
        let mut x = image.to_owned();
        for c in 0..3 {
            let (m, s) = (self.preprocess.mean[c], self.preprocess.std[c]);
            x.index_axis_mut(Axis(0), c).mapv_inplace(|v| (v - m) / s);
        }
        x
    }

    fn run(
        &self,
        image: ArrayView3<f64>,
        layers: &[String],
        keep: bool,
    ) -> Result<(Vec<FeatureMap>, Vec<Saved>, Vec<usize>)> {
        let (tap_blocks, last) = self.plan(layers)?;
        self.check_size(image, last)?;
        let mut x = self.input(image);
        let mut saved = Vec::new();
        let mut taps: Vec<Option<FeatureMap>> = vec![None; layers.len()];
        for (i, block) in self.blocks[..=last].iter().enumerate() {
            let record = match block {
                Block::Conv(c) => {
                    x = conv_forward(&x, c);
                    Saved::None
                }
                Block::Relu(_) => {
                    x.mapv_inplace(|v| v.max(0.0));
                    for (t, &b) in tap_blocks.iter().enumerate() {
                        if b == i {
                            taps[t] = Some(FeatureMap::from_chw(layers[t].clone(), &x));
                        }
                    }
                    if keep {
                        Saved::ReluOut(x.clone())
                    } else {
                        Saved::None
                    }
                }
                Block::Pool => {
                    let out = match self.config.pooling {
                        Pooling::Avg => avg_pool(&x),
                        Pooling::Max => max_pool(&x),
                    };
                    let input = std::mem::replace(&mut x, out);
                    match (keep, self.config.pooling) {
                        (false, _) => Saved::None,
                        (true, Pooling::Avg) => Saved::PoolShape(input.dim()),
                        (true, Pooling::Max) => Saved::PoolIn(input),
                    }
                }
            };
            saved.push(record);
        }
        let maps = taps.into_iter().map(|t| t.expect("every tap visited")).collect();
        Ok((maps, saved, tap_blocks))
    }
}

impl Backbone for ConvStack {
    fn id(&self) -> &str {
        &self.id
    }

    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn layer_spec(&self) -> &LayerSpec {
        &self.spec
    }

    fn available_layers(&self) -> &[LayerEntry] {
        &self.available
    }

    fn forward(&self, image: ArrayView3<f64>, layers: &[String]) -> Result<Vec<FeatureMap>> {
        self.run(image, layers, false).map(|(maps, ..)| maps)
    }

    fn vjp(
        &self,
        image: ArrayView3<f64>,
        layers: &[String],
        cotangent: &mut dyn FnMut(&[FeatureMap]) -> Result<Vec<Array2<f64>>>,
    ) -> Result<Array3<f64>> {
        let (maps, saved, tap_blocks) = self.run(image, layers, true)?;
        let grads = cotangent(&maps)?;
        if grads.len() != maps.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature gradients for {} layers",
                grads.len(),
                maps.len()
            )));
        }
        let last = saved.len() - 1;
        let mut g: Option<Array3<f64>> = None;
        for i in (0..=last).rev() {
            if let Block::Relu(_) = &self.blocks[i] {
                for (t, &b) in tap_blocks.iter().enumerate() {
                    if b == i {
                        let fm = &maps[t];
                        if grads[t].dim() != fm.data.dim() {
                            return Err(Error::DimensionMismatch(format!(
                                "gradient for {} has shape {:?}, expected {:?}",
                                fm.layer_id,
                                grads[t].dim(),
                                fm.data.dim()
                            )));
                        }
                        let tap = grads[t]
                            .view()
                            .into_shape_with_order((fm.channels, fm.height, fm.width))
                            .expect("tap shape");
                        match g.as_mut() {
                            Some(acc) => *acc += &tap,
                            None => g = Some(tap.to_owned()),
                        }
                    }
                }
            }
            let Some(cur) = g.take() else { continue };
            let next = match (&self.blocks[i], &saved[i]) {
                (Block::Relu(_), Saved::ReluOut(out)) => {
                    let mut d = cur;
                    ndarray::Zip::from(&mut d).and(out).for_each(|d, &o| {
                        if o <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    d
                }
                (Block::Pool, Saved::PoolShape(dim)) => avg_pool_backward(&cur, *dim),
                (Block::Pool, Saved::PoolIn(input)) => max_pool_backward(&cur, input),
                (Block::Conv(c), _) => conv_backward_input(&cur, c),
                _ => unreachable!("activations are saved for every relu and pool"),
            };
            g = Some(next);
        }
        let mut g = g.unwrap_or_else(|| Array3::zeros(image.dim()));
        for c in 0..3 {
            let s = self.preprocess.std[c];
            g.index_axis_mut(Axis(0), c).mapv_inplace(|v| v / s);
        }
        Ok(g)
    }
}

/// `(c * 9, h * w)` patch matrix for a zero-padded 3x3 window.
fn im2col(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * 9, h * w));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let mut row = cols.row_mut(ci * 9 + ky * 3 + kx);
                let row = row.as_slice_mut().expect("standard layout");
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = plane.row(sy as usize);
                    let dst = &mut row[y * w..(y + 1) * w];
                    for (xx, d) in dst.iter_mut().enumerate() {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            *d = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: ArrayView2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = x.index_axis_mut(Axis(0), ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = cols.row(ci * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let mut dst = plane.row_mut(sy as usize);
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_forward(x: &Array3<f64>, conv: &Conv) -> Array3<f64> {
    let (_, h, w) = x.dim();
    let cols = im2col(x);
    let mut out = conv.weight.dot(&cols);
    for (mut row, &b) in out.rows_mut().into_iter().zip(conv.bias.iter()) {
        if b != 0.0 {
            row += b;
        }
    }
    out.into_shape_with_order((conv.weight.nrows(), h, w))
        .expect("conv output shape")
}

fn conv_backward_input(g: &Array3<f64>, conv: &Conv) -> Array3<f64> {
    let (c_out, h, w) = g.dim();
    let g2 = g.view().into_shape_with_order((c_out, h * w)).expect("contiguous grad");
    let dcols = conv.weight.t().dot(&g2);
    col2im(dcols.view(), conv.weight.ncols() / 9, h, w)
}

fn avg_pool(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array3::from_shape_fn((c, oh, ow), |(ci, y, xx)| {
        0.25 * (x[[ci, 2 * y, 2 * xx]]
            + x[[ci, 2 * y, 2 * xx + 1]]
            + x[[ci, 2 * y + 1, 2 * xx]]
            + x[[ci, 2 * y + 1, 2 * xx + 1]])
    })
}

fn avg_pool_backward(g: &Array3<f64>, input_dim: (usize, usize, usize)) -> Array3<f64> {
    let mut d = Array3::zeros(input_dim);
    let (c, oh, ow) = g.dim();
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let v = 0.25 * g[[ci, y, x]];
                d[[ci, 2 * y, 2 * x]] = v;
                d[[ci, 2 * y, 2 * x + 1]] = v;
                d[[ci, 2 * y + 1, 2 * x]] = v;
                d[[ci, 2 * y + 1, 2 * x + 1]] = v;
            }
        }
    }
    d
}

fn max_pool_window(x: &Array3<f64>, ci: usize, y: usize, xx: usize) -> (usize, usize) {
    let mut best = (2 * y, 2 * xx);
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let cand = (2 * y + dy, 2 * xx + dx);
        if x[[ci, cand.0, cand.1]] > x[[ci, best.0, best.1]] {
            best = cand;
        }
    }
    best
}

fn max_pool(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, xx)| {
        let (by, bx) = max_pool_window(x, ci, y, xx);
        x[[ci, by, bx]]
    })
}

fn max_pool_backward(g: &Array3<f64>, input: &Array3<f64>) -> Array3<f64> {
    let mut d = Array3::zeros(input.dim());
    let (c, oh, ow) = g.dim();
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (by, bx) = max_pool_window(input, ci, y, x);
                d[[ci, by, bx]] += g[[ci, y, x]];
            }
        }
    }
    d
}

/// Crops a CHW tensor to dimensions divisible by `stride`.
pub fn crop_to_stride(image: ArrayView3<f64>, stride: usize) -> Array3<f64> {
    let (_, h, w) = image.dim();
    image
        .slice(s![.., ..h - h % stride, ..w - w % stride])
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Array3<f64>, conv: &Conv) -> Array3<f64> {
        let (c_in, h, w) = x.dim();
        let c_out = conv.weight.nrows();
        Array3::from_shape_fn((c_out, h, w), |(o, y, xx)| {
            let mut acc = conv.bias[o];
            for ci in 0..c_in {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = xx as isize + kx as isize - 1;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            acc += conv.weight[[o, ci * 9 + ky * 3 + kx]]
                                * x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn im2col_conv_matches_direct_loop() {
        let x = Array3::from_shape_fn((2, 5, 4), |(c, y, x)| ((c * 7 + y * 3 + x) as f64).sin());
        let conv = Conv {
            weight: Array2::from_shape_fn((3, 18), |(o, k)| ((o * 18 + k) as f64 * 0.37).cos()),
            bias: Array1::from(vec![0.1, -0.2, 0.0]),
        };
        let fast = conv_forward(&x, &conv);
        let slow = naive_conv(&x, &conv);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> == <x, conv^T(g)> for the bias-free map.
        let x = Array3::from_shape_fn((2, 4, 6), |(c, y, x)| ((c + 2 * y + 3 * x) as f64).sin());
        let g = Array3::from_shape_fn((3, 4, 6), |(c, y, x)| ((5 * c + y + x) as f64).cos());
        let conv = Conv {
            weight: Array2::from_shape_fn((3, 18), |(o, k)| ((o * 5 + k) as f64 * 0.11).sin()),
            bias: Array1::zeros(3),
        };
        let lhs: f64 = (&conv_forward(&x, &conv) * &g).sum();
        let rhs: f64 = (&x * &conv_backward_input(&g, &conv)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_adjoints() {
        let x = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| ((c * 16 + y * 4 + x) as f64 * 0.7).sin());
        let g = Array3::from_shape_fn((2, 2, 2), |(c, y, x)| (c + y + x) as f64 - 1.5);
        let lhs: f64 = (&avg_pool(&x) * &g).sum();
        let rhs: f64 = (&x * &avg_pool_backward(&g, x.dim())).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs: f64 = (&max_pool(&x) * &g).sum();
        let rhs: f64 = (&x * &max_pool_backward(&g, &x)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn random_backbone_layout() {
        let bb = BackboneConfig::random(&[4, 8, 8], 3).build().unwrap();
        let spec = bb.layer_spec();
        assert_eq!(spec.channel_counts(), vec![4, 8, 8]);
        assert_eq!(
            spec.layers.iter().map(|l| l.downsample).collect::<Vec<_>>(),
            vec![1, 2, 4]
        );
    }

    #[test]
    fn vgg_plan_indices_match_torchvision() {
        let convs = vgg19_convs();
        assert_eq!(convs.len(), 16);
        let idx: Vec<usize> = convs.iter().map(|c| c.1).collect();
        assert_eq!(
            idx,
            vec![0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34]
        );
        assert_eq!(convs[12].0, "relu5_1");
    }

    #[test]
    fn vgg_without_weights_fails() {
        let mut cfg = BackboneConfig::vgg19("/nonexistent/vgg19.safetensors");
        assert_eq!(cfg.build().err().unwrap().kind(), "BackboneWeights");
        cfg.weights = None;
        assert_eq!(cfg.build().err().unwrap().kind(), "BackboneWeights");
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let cfg = BackboneConfig {
            kind: "resnet".into(),
            ..BackboneConfig::desk()
        };
        assert_eq!(cfg.build().err().unwrap().kind(), "UnknownStrategy");
    }
}
