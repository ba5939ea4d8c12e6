use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub id: String,
    pub channels: usize,
    /// Spatial stride of this layer relative to the input image.
    pub downsample: usize,
}

/// Ordered backbone layers feeding the Gram extraction, shallow to deep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub backbone_id: String,
    pub layers: Vec<LayerEntry>,
}

impl LayerSpec {
    pub fn new(backbone_id: impl Into<String>, layers: Vec<LayerEntry>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyLayerSpec);
        }
        if layers.windows(2).any(|w| w[1].downsample < w[0].downsample) {
            return Err(Error::InvalidConfig(
                "layer downsample factors must be non-decreasing".into(),
            ));
        }
        if layers.iter().any(|l| l.downsample == 0) {
            return Err(Error::InvalidConfig("downsample factor must be >= 1".into()));
        }
        Ok(Self {
            backbone_id: backbone_id.into(),
            layers,
        })
    }

    /// The five canonical VGG-19 texture layers (`relu1_1` .. `relu5_1`).
    pub fn vgg19_five() -> Self {
        let widths = [64, 128, 256, 512, 512];
        Self::from_widths("vgg19-avg", &widths)
    }

    /// Layers `relu{k}_1` with the given widths at strides `1, 2, 4, ...`.
    pub fn from_widths(backbone_id: &str, widths: &[usize]) -> Self {
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| LayerEntry {
                id: format!("relu{}_1", i + 1),
                channels: c,
                downsample: 1 << i,
            })
            .collect();
        Self {
            backbone_id: backbone_id.into(),
            layers,
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
        self.layers.iter().map(|l| l.channels).collect()
    }

    pub fn max_stride(&self) -> usize {
        self.layers.iter().map(|l| l.downsample).max().unwrap_or(1)
    }
}
