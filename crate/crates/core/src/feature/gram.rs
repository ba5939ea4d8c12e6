use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};

use super::backbone::{crop_to_stride, Backbone, BackboneConfig};
use super::layers::LayerSpec;
use super::mask::MaskPyramid;
use super::sample::TextureSample;
use crate::container::{Container, Precision};
use crate::error::{dims, Error, Result};
use crate::linalg::symmetrize;

/// Activations of one backbone layer, stored `(channels, positions)` with
/// positions in row-major `(y, x)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layer_id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn from_chw(layer_id: String, x: &Array3<f64>) -> Self {
        let (c, h, w) = x.dim();
        let data = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous activations");
        Self {
            layer_id,
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    fn check_mask(&self, mask: &Array2<bool>) -> Result<usize> {
        if mask.dim() != (self.height, self.width) {
            return Err(dims(format!(
                "mask {:?} vs feature map {}x{} at {}",
                mask.dim(),
                self.height,
                self.width,
                self.layer_id
            )));
        }
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::EmptyMaskRegion {
                layer: self.layer_id.clone(),
            });
        }
        Ok(n)
    }

    /// Columns of `data` inside the mask, or the whole map for a full mask.
    fn masked_columns(&self, mask: &Array2<bool>, count: usize) -> Option<Array2<f64>> {
        if count == self.height * self.width {
            return None;
        }
        let keep: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(k, &m)| m.then_some(k))
            .collect();
        Some(self.data.select(Axis(1), &keep))
    }
}

/// Masked normalized Gram matrix `G_ij = (1/|M|) Σ_{k∈M} F_ki F_kj`.
///
/// Accumulated in `f64` and symmetrized so that `G == Gᵀ` bit-exactly.
pub fn compute_gram(fm: &FeatureMap, mask: &Array2<bool>) -> Result<Array2<f64>> {
    let count = fm.check_mask(mask)?;
    let g = match fm.masked_columns(mask, count) {
        Some(f) => f.dot(&f.t()),
        None => fm.data.dot(&fm.data.t()),
    };
    Ok(symmetrize(&(g / count as f64)))
}

/// Gradient of a scalar loss w.r.t. the feature map, given `dL/dG`.
pub fn gram_backward(fm: &FeatureMap, mask: &Array2<bool>, d_gram: ArrayView2<f64>) -> Result<Array2<f64>> {
    let count = fm.check_mask(mask)?;
    let sym = (&d_gram + &d_gram.t()) / count as f64;
    let mut grad = sym.dot(&fm.data);
    if count != fm.height * fm.width {
        for (k, &m) in mask.iter().enumerate() {
            if !m {
                grad.column_mut(k).fill(0.0);
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramLayer {
    pub id: String,
    pub matrix: Array2<f64>,
}

/// One Gram matrix per layer of a [`LayerSpec`]: the texture feature.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSet {
    pub backbone_id: String,
    pub layers: Vec<GramLayer>,
    /// How to rebuild the backbone these Grams came from, when known.
    pub backbone: Option<BackboneConfig>,
}

pub const NORMALIZATION: &str = "per-mask-cardinality";

impl GramSet {
    pub fn new(backbone_id: impl Into<String>, layers: Vec<GramLayer>) -> Self {
        Self {
            backbone_id: backbone_id.into(),
            layers,
            backbone: None,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.id.clone()).collect()
    }

    pub fn channel_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.matrix.nrows()).collect()
    }

    pub fn matrices(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.layers.iter().map(|l| &l.matrix)
    }

    pub fn check_compatible(&self, other: &GramSet) -> Result<()> {
        if self.ids() != other.ids() || self.channel_counts() != other.channel_counts() {
            return Err(dims(format!(
                "gram sets differ in structure: {:?}{:?} vs {:?}{:?}",
                self.ids(),
                self.channel_counts(),
                other.ids(),
                other.channel_counts()
            )));
        }
        Ok(())
    }

    /// Sum over layers of the Frobenius distance.
    pub fn distance(&self, other: &GramSet) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .matrices()
            .zip(other.matrices())
            .map(|(a, b)| frobenius(&(a - b)))
            .sum())
    }

    /// Per-layer `‖A − B‖_F / ‖B‖_F`, with `other` as the reference.
    pub fn relative_errors(&self, other: &GramSet) -> Result<Vec<f64>> {
        self.check_compatible(other)?;
        Ok(self
            .matrices()
            .zip(other.matrices())
            .map(|(a, b)| frobenius(&(a - b)) / frobenius(b).max(f64::MIN_POSITIVE))
            .collect())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        for layer in &self.layers {
            c.insert(
                format!("gram/{}", layer.id),
                Precision::F32,
                layer.matrix.clone().into_dyn(),
            );
        }
        c.set_meta("backbone_id", self.backbone_id.clone());
        c.set_meta_json("layer_ids", &self.ids())?;
        c.set_meta_json("channel_counts", &self.channel_counts())?;
        c.set_meta("normalization", NORMALIZATION);
        if let Some(cfg) = &self.backbone {
            c.set_meta_json("backbone_config", cfg)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let ids: Vec<String> = c.meta_json("layer_ids")?;
        let counts: Vec<usize> = c.meta_json("channel_counts")?;
        if ids.len() != counts.len() {
            return Err(Error::Format("layer_ids and channel_counts differ in length".into()));
        }
        let norm = c.meta("normalization")?;
        if norm != NORMALIZATION {
            return Err(Error::Format(format!("unsupported normalization '{norm}'")));
        }
        let layers = ids
            .iter()
            .zip(&counts)
            .map(|(id, &n)| {
                let m = c
                    .get(&format!("gram/{id}"))?
                    .clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .map_err(|e| Error::Format(e.to_string()))?;
                if m.dim() != (n, n) {
                    return Err(Error::Format(format!("gram/{id} has shape {:?}", m.dim())));
                }
                Ok(GramLayer {
                    id: id.clone(),
                    matrix: m,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let backbone = if c.metadata().contains_key("backbone_config") {
            Some(c.meta_json("backbone_config")?)
        } else {
            None
        };
        Ok(Self {
            backbone_id: c.meta("backbone_id")?.to_string(),
            layers,
            backbone,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Feature maps of `spec`'s layers for the sample's image.
pub fn extract_features(
    backbone: &dyn Backbone,
    sample: &TextureSample,
    spec: &LayerSpec,
) -> Result<Vec<FeatureMap>> {
    if spec.is_empty() {
        return Err(Error::EmptyLayerSpec);
    }
    let maps = backbone.forward(sample.image().view(), &spec.ids())?;
    for (fm, entry) in maps.iter().zip(&spec.layers) {
        if fm.channels != entry.channels {
            return Err(dims(format!(
                "layer {} has {} channels, spec says {}",
                entry.id, fm.channels, entry.channels
            )));
        }
    }
    Ok(maps)
}

/// Masked Gram matrices for every layer of `spec`.
///
/// The sample is cropped (top-left) to a multiple of the deepest stride so
/// that every downsampled mask lines up with its feature map.
pub fn extract_gram_set(
    backbone: &dyn Backbone,
    sample: &TextureSample,
    spec: &LayerSpec,
) -> Result<GramSet> {
    if spec.is_empty() {
        return Err(Error::EmptyLayerSpec);
    }
    let stride = spec.max_stride();
    let (h, w) = (sample.height(), sample.width());
    if h < stride || w < stride {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            stride,
        });
    }
    let cropped;
    let sample = if h % stride != 0 || w % stride != 0 {
        let image = crop_to_stride(sample.image().view(), stride);
        let (_, ch, cw) = image.dim();
        cropped = sample.crop(ch, cw)?;
        &cropped
    } else {
        sample
    };
    let factors: Vec<usize> = spec.layers.iter().map(|l| l.downsample).collect();
    let pyramid = MaskPyramid::build(sample.mask(), &factors);
    for (entry, &n) in spec.layers.iter().zip(&pyramid.cardinalities) {
        if n == 0 {
            return Err(Error::EmptyMaskRegion {
                layer: entry.id.clone(),
            });
        }
    }
    let maps = extract_features(backbone, sample, spec)?;
    let layers = maps
        .iter()
        .zip(&pyramid.masks)
        .map(|(fm, m)| {
            Ok(GramLayer {
                id: fm.layer_id.clone(),
                matrix: compute_gram(fm, m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GramSet {
        backbone_id: backbone.id().to_string(),
        layers,
        backbone: Some(backbone.config().clone()),
    })
}
