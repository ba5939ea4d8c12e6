use ndarray::Array2;

/// Majority-rule downsampling: an output cell is set iff strictly more than
/// half of its `factor x factor` block is set. Ragged edges are padded with 0.
pub fn downsample_mask(mask: &Array2<bool>, factor: usize) -> Array2<bool> {
    assert!(factor >= 1, "downsample factor must be positive");
    if factor == 1 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let block = factor * factor;
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let mut ones = 0;
        for y in oy * factor..((oy + 1) * factor).min(h) {
            for x in ox * factor..((ox + 1) * factor).min(w) {
                ones += mask[[y, x]] as usize;
            }
        }
        2 * ones > block
    })
}

/// Per-layer masks `M^(l)` with their cardinalities.
#[derive(Debug, Clone)]
pub struct MaskPyramid {
    pub masks: Vec<Array2<bool>>,
    pub cardinalities: Vec<usize>,
}

impl MaskPyramid {
    pub fn build(mask: &Array2<bool>, factors: &[usize]) -> Self {
        let masks: Vec<_> = factors.iter().map(|&f| downsample_mask(mask, f)).collect();
        let cardinalities = masks
            .iter()
            .map(|m| m.iter().filter(|&&v| v).count())
            .collect();
        Self {
            masks,
            cardinalities,
        }
    }
}
