use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::feature::{Backbone, BackboneConfig, Image};
use crate::linalg::{psd_sqrt, sym_eigen, symmetrize};
use crate::registry::Registry;

/// Maps images to fixed-length feature vectors.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;
    fn features(&self, images: &[Image]) -> Result<Array2<f64>>;
}

/// Spatial means of every tapped layer of a frozen backbone, concatenated.
pub struct PooledBackboneExtractor {
    pub backbone: Arc<dyn Backbone>,
    pub layers: Vec<String>,
}

impl PooledBackboneExtractor {
    pub fn new(backbone: Arc<dyn Backbone>) -> Self {
        let layers = backbone.layer_spec().ids();
        Self { backbone, layers }
    }
}

impl FeatureExtractor for PooledBackboneExtractor {
    fn id(&self) -> String {
        format!("pooled:{}", self.backbone.id())
    }

    fn features(&self, images: &[Image]) -> Result<Array2<f64>> {
        let mut rows: Vec<Array1<f64>> = Vec::with_capacity(images.len());
        for img in images {
            let maps = self.backbone.forward(img.view(), &self.layers)?;
            let parts: Vec<f64> = maps
                .iter()
                .flat_map(|fm| fm.data.mean_axis(Axis(1)).expect("non-empty feature map").to_vec())
                .collect();
            rows.push(Array1::from(parts));
        }
        let d = rows.first().map_or(0, |r| r.len());
        let mut out = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(r);
        }
        Ok(out)
    }
}

pub type ExtractorFactory = dyn Fn(&BackboneConfig) -> Result<Box<dyn FeatureExtractor>> + Send + Sync;

/// Feature extractors by name. `pooled` accepts any backbone config,
/// including pretrained weights.
pub fn extractor_registry() -> Registry<ExtractorFactory> {
    let mut reg: Registry<ExtractorFactory> = Registry::new("extractor");
    reg.register(
        "pooled",
        Box::new(|cfg: &BackboneConfig| {
            Ok(Box::new(PooledBackboneExtractor::new(cfg.build()?)) as Box<dyn FeatureExtractor>)
        }),
    );
    reg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub score: f64,
    pub extractor: String,
    pub n_a: usize,
    pub n_b: usize,
}

fn mean_and_cov(x: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows();
    let mu = x.mean_axis(Axis(0)).expect("at least one row");
    let c = &x - &mu;
    let cov = c.t().dot(&c) / (n as f64 - 1.0);
    (mu, symmetrize(&cov))
}

/// Fréchet distance between `N(mu_a, cov_a)` and `N(mu_b, cov_b)`.
///
/// The trace of `(Σ_a Σ_b)^{1/2}` is taken as the trace of the PSD root of
/// `Σ_a^{1/2} Σ_b Σ_a^{1/2}`, which has the same eigenvalues. Negative
/// eigenvalues from round-off are clipped; a warning is logged when they are
/// not negligible.
pub fn frechet_distance(
    mu_a: &Array1<f64>,
    cov_a: &Array2<f64>,
    mu_b: &Array1<f64>,
    cov_b: &Array2<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.dim() != (d, d) || cov_b.dim() != (d, d) {
        return Err(dims("Fréchet distance operands differ in dimension"));
    }
    let root_a = psd_sqrt(symmetrize(cov_a).view());
    let m = symmetrize(&root_a.dot(cov_b).dot(&root_a));
    let (eigs, _) = sym_eigen(m.view());
    let scale = eigs.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    if eigs.iter().any(|&l| l < -1e-8 * scale) {
        log::warn!("matrix square root input is not PSD; clipping negative eigenvalues");
    }
    let tr_root: f64 = eigs.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    let score = diff.dot(&diff) + cov_a.diag().sum() + cov_b.diag().sum() - 2.0 * tr_root;
    Ok(score.max(0.0))
}

/// FID between two feature matrices (rows are samples), using unbiased
/// covariances.
pub fn fid_from_features(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "FID needs at least 2 samples per set, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(dims(format!("feature widths {} and {}", a.ncols(), b.ncols())));
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);
    frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b)
}

pub fn compute_fid(set_a: &[Image], set_b: &[Image], extractor: &dyn FeatureExtractor) -> Result<FidReport> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "FID needs at least 2 images per set, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    let fa = extractor.features(set_a)?;
    let fb = extractor.features(set_b)?;
    Ok(FidReport {
        score: fid_from_features(fa.view(), fb.view())?,
        extractor: extractor.id(),
        n_a: set_a.len(),
        n_b: set_b.len(),
    })
}
