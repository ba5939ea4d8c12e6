//! Backbone feature extraction and masked, normalized Gram matrices.

mod backbone;
mod gram;
mod layers;
mod mask;
mod sample;

pub use backbone::{
    backbone_registry, crop_to_stride, vgg19_convs, vgg19_random_weights, Backbone,
    BackboneBuilder, BackboneConfig, ConvStack, Pooling,
};
pub use gram::{
    compute_gram, extract_features, extract_gram_set, frobenius, gram_backward, FeatureMap,
    GramLayer, GramSet, NORMALIZATION,
};
pub use layers::{LayerEntry, LayerSpec};
pub use mask::{downsample_mask, MaskPyramid};
pub use sample::{load_image, load_mask, save_mask, save_png, to_rgb8, Image, TextureSample};
