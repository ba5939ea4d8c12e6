use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::gmm::GmmModel;
use crate::linalg::{sym_eigen, symmetrize};

/// Top-two principal frame of a set of codes.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaFrame {
    pub mean: Array1<f64>,
    /// `2 x d`; rows are unit principal directions, or zero when the data
    /// has fewer than two dimensions.
    pub axes: Array2<f64>,
    pub variances: [f64; 2],
}

impl PcaFrame {
    pub fn fit(codes: ArrayView2<f64>) -> Result<Self> {
        let (n, d) = codes.dim();
        if n < 2 {
            return Err(Error::InsufficientSamples(format!("PCA needs at least 2 codes, got {n}")));
        }
        let mean = codes.mean_axis(Axis(0)).expect("non-empty");
        let c = &codes - &mean;
        let cov = symmetrize(&(c.t().dot(&c) / n as f64));
        let (vals, vecs) = sym_eigen(cov.view());
        let mut axes = Array2::zeros((2, d));
        let mut variances = [0.0; 2];
        for k in 0..2.min(d) {
            let col = d - 1 - k;
            let mut v = vecs.column(col).to_owned();
            // Sign convention: largest-magnitude entry positive.
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.mapv_inplace(|x| -x);
            }
            axes.row_mut(k).assign(&v);
            variances[k] = vals[col].max(0.0);
        }
        if d < 2 {
            log::warn!("codes have {d} dimension(s); padding the embedding with a zero axis");
        } else if variances[1] <= 1e-12 * variances[0].max(f64::MIN_POSITIVE) {
            log::warn!("codes are rank deficient; the second axis carries no variance");
        }
        Ok(Self { mean, axes, variances })
    }

    pub fn project(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(dims(format!("codes have width {}, frame expects {}", x.ncols(), self.mean.len())));
        }
        Ok((&x - &self.mean).dot(&self.axes.t()))
    }

    /// Projected mean and 2x2 covariance `A Σ Aᵀ`.
    pub fn project_gaussian(&self, mean: ArrayView2<f64>, cov: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let m = self.project(mean)?.row(0).to_owned();
        let c = self.axes.dot(&cov).dot(&self.axes.t());
        Ok((m, symmetrize(&c)))
    }
}

/// A 2-D ellipse: `center + R(angle) diag(radii) unit circle`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub component: usize,
    pub weight: f64,
    pub center: [f64; 2],
    pub radii: [f64; 2],
    /// Orientation of the first radius, radians.
    pub angle: f64,
}

impl Ellipse {
    /// One-sigma ellipse of a 2-D Gaussian.
    pub fn from_gaussian(component: usize, weight: f64, mean: &Array1<f64>, cov: &Array2<f64>) -> Self {
        let (vals, vecs) = sym_eigen(cov.view());
        Self {
            component,
            weight,
            center: [mean[0], mean[1]],
            radii: [vals[1].max(0.0).sqrt(), vals[0].max(0.0).sqrt()],
            angle: vecs[[1, 1]].atan2(vecs[[0, 1]]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub frame: PcaFrame,
    pub codes: Array2<f64>,
    pub samples: Array2<f64>,
    pub ellipses: Vec<Ellipse>,
}

impl Embedding {
    /// `kind,x,y` rows for codes and samples, plus a JSON file of ellipses
    /// next to it.
    pub fn write(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let path = csv_path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(fmt)?;
        w.write_record(["kind", "x", "y"]).map_err(fmt)?;
        for (kind, pts) in [("code", &self.codes), ("sample", &self.samples)] {
            for r in pts.rows() {
                w.serialize((kind, r[0], r[1])).map_err(fmt)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let json = serde_json::to_string_pretty(&self.ellipses).map_err(|e| Error::Format(e.to_string()))?;
        let ell = path.with_extension("ellipses.json");
        fs::write(&ell, json).map_err(|e| Error::io(&ell, e))
    }
}

/// Fits the frame on `codes` and projects `samples` and the mixture's
/// components into it.
pub fn pca_embed(codes: ArrayView2<f64>, samples: ArrayView2<f64>, gmm: Option<&GmmModel>) -> Result<Embedding> {
    let frame = PcaFrame::fit(codes)?;
    let projected_codes = frame.project(codes)?;
    let projected_samples = frame.project(samples)?;
    let mut ellipses = Vec::new();
    if let Some(g) = gmm {
        for k in 0..g.n_components() {
            let mean = g.means.row(k).insert_axis(Axis(0));
            let (m, c) = frame.project_gaussian(mean, g.cov(k))?;
            ellipses.push(Ellipse::from_gaussian(k, g.weights[k], &m, &c));
        }
    }
    Ok(Embedding {
        frame,
        codes: projected_codes,
        samples: projected_samples,
        ellipses,
    })
}
