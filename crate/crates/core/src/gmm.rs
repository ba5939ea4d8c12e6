//! Gaussian mixture prior over latent codes.
//!
//! After the auto-encoder is trained, a full-covariance mixture is fitted to
//! the training codes by EM and used in place of the standard normal when
//! sampling new codes. Sampling can also be written as a component draw
//! followed by an affine map `z = μ_k + S_k ε` with `S_k S_kᵀ = Σ_k`.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::{Container, Precision};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, from_na, sym_apply, sym_eigen, symmetrize, to_na};
use crate::registry::Registry;

/// Default lower bound on covariance eigenvalues.
pub const DEFAULT_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Mixture weights, means `(n_c, d)` and covariances `(n_c, d, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Array1<f64>,
    pub means: Array2<f64>,
    pub covs: Array3<f64>,
    pub floor: f64,
}

/// Settings for [`fit_gmm`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub n_components: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the mean per-sample log-likelihood improves by less than this.
    pub tol: f64,
    pub floor: f64,
}

impl FitOptions {
    pub fn new(n_components: usize, seed: u64) -> Self {
        Self {
            n_components,
            seed,
            max_iters: 500,
            tol: 1e-6,
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Mean per-sample log-likelihood of each parameter iterate.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Components re-seeded after losing all responsibility mass.
    pub reseeds: usize,
}

/// Raises eigenvalues below `floor` to `floor`; leaves the matrix untouched
/// otherwise.
fn apply_floor(cov: &Array2<f64>, floor: f64) -> Array2<f64> {
    let sym = symmetrize(cov);
    let (values, _) = sym_eigen(sym.view());
    if values[0] >= floor {
        return sym;
    }
    sym_apply(sym.view(), |l| l.max(floor))
}

/// Per-component factor used for densities and sampling.
struct Factor {
    chol: Array2<f64>,
    log_det: f64,
}

fn factor(cov: ArrayView2<f64>, component: usize) -> Result<Factor> {
    let mut jitter = 0.0;
    let d = cov.nrows();
    for _ in 0..8 {
        let m = if jitter > 0.0 { &cov + &(Array2::<f64>::eye(d) * jitter) } else { cov.to_owned() };
        if let Some(chol) = cholesky(m.view()) {
            let log_det = 2.0 * chol.diag().mapv(f64::ln).sum();
            return Ok(Factor { chol, log_det });
        }
        jitter = if jitter == 0.0 { 1e-12 * (1.0 + cov.diag().iter().fold(0.0f64, |a, &b| a.max(b.abs()))) } else { jitter * 100.0 };
    }
    Err(Error::NonPsdCovariance { component })
}

/// `log N(x_i; μ, Σ)` for every row of `x`.
fn log_density(x: ArrayView2<f64>, mean: ArrayView1<f64>, f: &Factor) -> Array1<f64> {
    let d = x.ncols();
    let diff = &x - &mean;
    let rhs = to_na(diff.t());
    let y = to_na(f.chol.view())
        .solve_lower_triangular(&rhs)
        .expect("nonsingular factor");
    let y = from_na(&y);
    let maha = y.mapv(|v| v * v).sum_axis(Axis(0));
    maha.mapv(|m| -0.5 * (d as f64 * LN_2PI + f.log_det + m))
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + row.mapv(|v| (v - m).exp()).sum().ln()
}

impl GmmModel {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, covs: Array3<f64>, floor: f64) -> Result<Self> {
        let k = weights.len();
        let d = means.ncols();
        if k == 0 || means.nrows() != k || covs.dim() != (k, d, d) {
            return Err(Error::DimensionMismatch(format!(
                "weights {k}, means {:?}, covs {:?}",
                means.dim(),
                covs.dim()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("mixture weights must lie on the simplex".into()));
        }
        Ok(Self {
            weights,
            means,
            covs,
            floor,
        })
    }

    /// `N(0, I)` as a one-component mixture.
    pub fn standard_normal(dim: usize) -> Self {
        let mut covs = Array3::zeros((1, dim, dim));
        covs.index_axis_mut(Axis(0), 0).assign(&Array2::eye(dim));
        Self {
            weights: Array1::ones(1),
            means: Array2::zeros((1, dim)),
            covs,
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn cov(&self, k: usize) -> ArrayView2<'_, f64> {
        self.covs.index_axis(Axis(0), k)
    }

    fn factors(&self) -> Result<Vec<Factor>> {
        (0..self.n_components()).map(|k| factor(self.cov(k), k)).collect()
    }

    /// `log π_k + log N(x_i; μ_k, Σ_k)` as an `(n, n_c)` matrix.
    fn joint_log(&self, x: ArrayView2<f64>, factors: &[Factor]) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.n_components()));
        for (k, f) in factors.iter().enumerate() {
            let col = log_density(x, self.means.row(k), f) + self.weights[k].ln();
            out.column_mut(k).assign(&col);
        }
        out
    }

    fn check_dim(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "codes of width {}, mixture of dimension {}",
                x.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Mean per-sample log-likelihood.
    pub fn log_likelihood(&self, x: ArrayView2<f64>) -> Result<f64> {
        self.check_dim(x)?;
        if x.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let j = self.joint_log(x, &self.factors()?);
        Ok(j.rows().into_iter().map(log_sum_exp).sum::<f64>() / x.nrows() as f64)
    }

    /// Posterior component probabilities, one row per sample.
    pub fn responsibilities(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_dim(x)?;
        let mut j = self.joint_log(x, &self.factors()?);
        for mut row in j.rows_mut() {
            let l = log_sum_exp(row.view());
            row.mapv_inplace(|v| (v - l).exp());
        }
        Ok(j)
    }

    fn pick_component(&self, rng: &mut dyn RngCore) -> usize {
        if self.n_components() == 1 {
            return 0;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.n_components() - 1
    }

    /// `n` codes as rows. With one component no categorical draw is made, so
    /// `N(0, I)` reproduces plain standard-normal draws from the same stream.
    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        let factors = self.factors()?;
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let k = self.pick_component(rng);
            let eps = Array1::from_shape_simple_fn(d, || StandardNormal.sample(rng));
            row.assign(&(&self.means.row(k) + &factors[k].chol.dot(&eps)));
        }
        Ok(out)
    }

    /// Component selector plus symmetric square roots of the covariances.
    pub fn to_affine_sampler(&self) -> Result<AffineSampler> {
        let d = self.dim();
        let mut roots = Array3::zeros((self.n_components(), d, d));
        for k in 0..self.n_components() {
            let cov = self.cov(k);
            let (values, _) = sym_eigen(cov);
            let scale = values.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
            if values[0] < -1e-9 * scale {
                return Err(Error::NonPsdCovariance { component: k });
            }
            roots
                .index_axis_mut(Axis(0), k)
                .assign(&sym_apply(cov, |l| l.max(0.0).sqrt()));
        }
        Ok(AffineSampler {
            weights: self.weights.clone(),
            biases: self.means.clone(),
            sqrt_covs: roots,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.insert("gmm/weights", Precision::F64, self.weights.clone().into_dyn());
        c.insert("gmm/means", Precision::F64, self.means.clone().into_dyn());
        c.insert("gmm/covs", Precision::F64, self.covs.clone().into_dyn());
        if let Ok(a) = self.to_affine_sampler() {
            c.insert("gmm/sqrt_covs", Precision::F64, a.sqrt_covs.into_dyn());
        }
        c.set_meta_json("n_c", &self.n_components())?;
        c.set_meta_json("d_e", &self.dim())?;
        c.set_meta_json("floor", &self.floor)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let fmt = |e: ndarray::ShapeError| Error::Format(e.to_string());
        let weights = c.get("gmm/weights")?.clone().into_dimensionality().map_err(fmt)?;
        let means = c.get("gmm/means")?.clone().into_dimensionality().map_err(fmt)?;
        let covs = c.get("gmm/covs")?.clone().into_dimensionality().map_err(fmt)?;
        let floor = c.meta_json("floor").unwrap_or(DEFAULT_FLOOR);
        Self::new(weights, means, covs, floor)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// GMM sampling written as `z = μ_k + S_k ε` with a categorical `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSampler {
    pub weights: Array1<f64>,
    pub biases: Array2<f64>,
    pub sqrt_covs: Array3<f64>,
}

impl AffineSampler {
    /// The affine map for component `k` applied to a noise vector.
    pub fn apply(&self, k: usize, eps: ArrayView1<f64>) -> Array1<f64> {
        &self.biases.row(k) + &self.sqrt_covs.index_axis(Axis(0), k).dot(&eps)
    }

    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Array2<f64> {
        let d = self.biases.ncols();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let k = if self.weights.len() == 1 {
                0
            } else {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                self.weights
                    .iter()
                    .position(|&w| {
                        acc += w;
                        u < acc
                    })
                    .unwrap_or(self.weights.len() - 1)
            };
            let eps = Array1::from_shape_simple_fn(d, || StandardNormal.sample(rng));
            row.assign(&self.apply(k, eps.view()));
        }
        out
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding: indices of the chosen centers.
fn kmeans_pp(x: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = x.nrows();
    let mut centers = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(centers[0]))).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&v| {
                    acc += v;
                    u < acc
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    centers
}

/// Weighted mean and ML covariance of `x` under weights `r` (summing to `nk`).
fn weighted_moments(x: ArrayView2<f64>, r: ArrayView1<f64>, nk: f64) -> (Array1<f64>, Array2<f64>) {
    let mean = r.dot(&x) / nk;
    let diff = &x - &mean;
    let scaled = &diff * &r.insert_axis(Axis(1));
    let cov = scaled.t().dot(&diff) / nk;
    (mean, symmetrize(&cov))
}

fn m_step(
    x: ArrayView2<f64>,
    resp: &Array2<f64>,
    floor: f64,
    rng: &mut ChaCha8Rng,
    reseeds: &mut usize,
) -> GmmModel {
    let (n, d) = x.dim();
    let k = resp.ncols();
    let mut weights = Array1::zeros(k);
    let mut means = Array2::zeros((k, d));
    let mut covs = Array3::zeros((k, d, d));
    let min_mass = 1e-10 * n as f64;
    for c in 0..k {
        let r = resp.column(c);
        let nk = r.sum();
        let (mean, cov, w) = if nk > min_mass {
            let (m, s) = weighted_moments(x, r, nk);
            (m, s, nk / n as f64)
        } else {
            *reseeds += 1;
            let i = rng.random_range(0..n);
            let ones = Array1::ones(n);
            let (_, s) = weighted_moments(x, ones.view(), n as f64);
            (x.row(i).to_owned(), s, 1.0 / k as f64)
        };
        weights[c] = w;
        means.row_mut(c).assign(&mean);
        covs.index_axis_mut(Axis(0), c).assign(&apply_floor(&cov, floor));
    }
    let total = weights.sum();
    weights /= total;
    GmmModel {
        weights,
        means,
        covs,
        floor,
    }
}

/// Full-covariance EM with k-means++ initialization.
pub fn fit_gmm(codes: ArrayView2<f64>, opts: &FitOptions) -> Result<(GmmModel, FitReport)> {
    let (n, _) = codes.dim();
    if opts.n_components == 0 {
        return Err(Error::InvalidConfig("n_components must be >= 1".into()));
    }
    if n < opts.n_components {
        return Err(Error::InsufficientSamples(format!(
            "{n} codes for {} components",
            opts.n_components
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reseeds = 0;
    let centers = kmeans_pp(codes, opts.n_components, &mut rng);
    let mut resp = Array2::zeros((n, opts.n_components));
    for i in 0..n {
        let best = (0..centers.len())
            .min_by(|&a, &b| {
                sq_dist(codes.row(i), codes.row(centers[a])).total_cmp(&sq_dist(codes.row(i), codes.row(centers[b])))
            })
            .expect("at least one center");
        resp[[i, best]] = 1.0;
    }
    let mut model = m_step(codes, &resp, opts.floor, &mut rng, &mut reseeds);

    let mut lls = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let factors = model.factors()?;
        let mut j = model.joint_log(codes, &factors);
        let mut total = 0.0;
        for mut row in j.rows_mut() {
            let l = log_sum_exp(row.view());
            total += l;
            row.mapv_inplace(|v| (v - l).exp());
        }
        let ll = total / n as f64;
        if let Some(&prev) = lls.last() {
            if ll - prev < opts.tol {
                lls.push(ll);
                converged = true;
                break;
            }
        }
        lls.push(ll);
        if iterations >= opts.max_iters {
            break;
        }
        let next = m_step(codes, &j, opts.floor, &mut rng, &mut reseeds);
        iterations += 1;
        model = next;
    }
    Ok((
        model,
        FitReport {
            log_likelihoods: lls,
            iterations,
            converged,
            reseeds,
        },
    ))
}

/// Cross-validated choice of the number of components.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub best: usize,
    /// `(candidate, mean held-out log-likelihood)` in ascending candidate order.
    pub scores: Vec<(usize, f64)>,
}

pub const DEFAULT_CANDIDATES: [usize; 5] = [4, 8, 12, 16, 24];

/// Picks the candidate with the highest mean held-out log-likelihood over
/// `folds` folds. Ties go to the smallest candidate.
pub fn select_n_components(codes: ArrayView2<f64>, candidates: &[usize], folds: usize, seed: u64) -> Result<CvReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidate component counts".into()));
    }
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if cands.len() == 1 {
        return Ok(CvReport {
            best: cands[0],
            scores: vec![(cands[0], f64::NAN)],
        });
    }
    if folds < 2 {
        return Err(Error::InvalidConfig("cross-validation needs at least 2 folds".into()));
    }
    let n = codes.nrows();
    let largest = *cands.last().expect("nonempty");
    let min_train = n - n.div_ceil(folds);
    if n < folds || min_train < largest {
        return Err(Error::InsufficientSamples(format!(
            "{n} codes cannot be split into {folds} folds with {largest} components per training split"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let fold_of = |pos: usize| pos * folds / n;
    let mut scores = Vec::new();
    for &k in &cands {
        let mut sum = 0.0;
        for f in 0..folds {
            let (train, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|&p| fold_of(p) != f);
            let pick = |idx: &[usize]| codes.select(Axis(0), &idx.iter().map(|&p| order[p]).collect::<Vec<_>>());
            let (model, _) = fit_gmm(pick(&train).view(), &FitOptions::new(k, seed.wrapping_add(f as u64)))?;
            sum += model.log_likelihood(pick(&test).view())?;
        }
        scores.push((k, sum / folds as f64));
    }
    Ok(CvReport {
        best: best_candidate(&scores),
        scores,
    })
}

/// Highest score wins; on exact ties the earliest (smallest) candidate.
fn best_candidate(scores: &[(usize, f64)]) -> usize {
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    best.0
}

/// A distribution over latent codes to decode from.
pub trait LatentPrior: Send + Sync {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<Array2<f64>>;
}

pub struct GmmPrior(pub GmmModel);

impl LatentPrior for GmmPrior {
    fn name(&self) -> &'static str {
        "gmm"
    }

    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        self.0.sample(n, rng)
    }
}

pub struct StandardNormalPrior {
    pub dim: usize,
}

impl LatentPrior for StandardNormalPrior {
    fn name(&self) -> &'static str {
        "standard-normal"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_simple_fn((n, self.dim), || StandardNormal.sample(rng)))
    }
}

/// Inputs a prior factory may draw on.
pub struct PriorContext<'a> {
    pub gmm: Option<&'a GmmModel>,
    pub dim: usize,
}

pub type PriorFactory = dyn Fn(&PriorContext) -> Result<Box<dyn LatentPrior>> + Send + Sync;

pub fn prior_registry() -> Registry<PriorFactory> {
    let mut reg: Registry<PriorFactory> = Registry::new("latent prior");
    reg.register(
        "gmm",
        Box::new(|ctx: &PriorContext| {
            let g = ctx
                .gmm
                .ok_or_else(|| Error::InvalidConfig("the gmm prior needs a fitted mixture".into()))?;
            Ok(Box::new(GmmPrior(g.clone())) as Box<dyn LatentPrior>)
        }),
    );
    reg.register(
        "standard-normal",
        Box::new(|ctx: &PriorContext| Ok(Box::new(StandardNormalPrior { dim: ctx.dim }) as Box<dyn LatentPrior>)),
    );
    reg
}

/// First two moments of the rows of `x` (ML covariance).
pub fn sample_moments(x: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows() as f64;
    let ones = Array1::ones(x.nrows());
    weighted_moments(x, ones.view(), n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_root_and_diagonal_root() {
        let g = GmmModel::standard_normal(3);
        let a = g.to_affine_sampler().unwrap();
        let s = a.sqrt_covs.index_axis(Axis(0), 0);
        for ((i, j), v) in s.indexed_iter() {
            assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
        let mut covs = Array3::zeros((1, 2, 2));
        covs.index_axis_mut(Axis(0), 0).assign(&array![[4.0, 0.0], [0.0, 9.0]]);
        let g = GmmModel::new(array![1.0], Array2::zeros((1, 2)), covs, DEFAULT_FLOOR).unwrap();
        let s = g.to_affine_sampler().unwrap().sqrt_covs;
        assert!((s[[0, 0, 0]] - 2.0).abs() < 1e-12 && (s[[0, 1, 1]] - 3.0).abs() < 1e-12);
        assert!(s[[0, 0, 1]].abs() < 1e-12);
    }

    #[test]
    fn non_psd_is_rejected() {
        let mut covs = Array3::zeros((1, 2, 2));
        covs.index_axis_mut(Axis(0), 0).assign(&array![[1.0, 0.0], [0.0, -1.0]]);
        let g = GmmModel::new(array![1.0], Array2::zeros((1, 2)), covs, DEFAULT_FLOOR).unwrap();
        assert_eq!(g.to_affine_sampler().unwrap_err().kind(), "NonPsdCovariance");
    }

    #[test]
    fn identical_codes_hit_the_floor() {
        let x = Array2::from_elem((10, 3), 2.5);
        let (g, _) = fit_gmm(x.view(), &FitOptions::new(1, 0)).unwrap();
        let (values, _) = sym_eigen(g.cov(0));
        assert!(values.iter().all(|&v| (v - DEFAULT_FLOOR).abs() < 1e-12));
        assert_eq!(g.means.row(0), array![2.5, 2.5, 2.5]);
        let s = g.sample(5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.iter().all(|v| (v - 2.5).abs() < 1e-2));
    }

    #[test]
    fn too_few_samples() {
        let x = Array2::zeros((2, 3));
        assert_eq!(fit_gmm(x.view(), &FitOptions::new(3, 0)).unwrap_err().kind(), "InsufficientSamples");
    }

    #[test]
    fn ties_go_to_the_smallest_candidate() {
        assert_eq!(best_candidate(&[(4, -1.0), (8, -1.0), (12, -2.0)]), 4);
        assert_eq!(best_candidate(&[(4, -1.0), (8, -0.5), (12, -0.5)]), 8);
    }

    #[test]
    fn singleton_candidate() {
        let x = Array2::zeros((3, 2));
        assert_eq!(select_n_components(x.view(), &[7], 5, 0).unwrap().best, 7);
    }

    #[test]
    fn container_round_trip() {
        let g = GmmModel::standard_normal(4);
        let back = GmmModel::from_container(&Container::from_bytes(&g.to_container().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn registry_priors() {
        let reg = prior_registry();
        let g = GmmModel::standard_normal(2);
        let ctx = PriorContext { gmm: Some(&g), dim: 2 };
        assert_eq!(reg.get("gmm").unwrap()(&ctx).unwrap().name(), "gmm");
        let none = PriorContext { gmm: None, dim: 2 };
        assert!(reg.get("gmm").unwrap()(&none).is_err());
        assert_eq!(reg.get("standard-normal").unwrap()(&none).unwrap().dim(), 2);
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_simple_fn((60, 2), || StandardNormal.sample(&mut r));
        let (g, _) = fit_gmm(x.view(), &FitOptions::new(3, 1)).unwrap();
        let resp = g.responsibilities(x.view()).unwrap();
        for row in resp.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
}
