#![allow(dead_code)]

use ndarray::{s, Array, Array1, Array2, ArrayD, Axis, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use texgram::feature::{GramLayer, GramSet, LayerSpec};
use texgram::nn::ParamSet;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<D: Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(shape: Sh, rng: &mut ChaCha8Rng) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

pub fn rand_sym(c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let a: Array2<f64> = randn((c, c), rng);
    let s = &a + &a.t();
    Array2::from_shape_fn((c, c), |(i, j)| if i <= j { s[[i, j]] } else { s[[j, i]] })
}

pub fn random_gram_set(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> GramSet {
    let layers = spec
        .layers
        .iter()
        .map(|l| {
            let f: Array2<f64> = randn((l.channels, 6), rng);
            let g = f.dot(&f.t()) / 6.0;
            GramLayer {
                id: l.id.clone(),
                matrix: Array2::from_shape_fn(g.raw_dim(), |(i, j)| if i <= j { g[[i, j]] } else { g[[j, i]] }),
            }
        })
        .collect();
    GramSet::new(spec.backbone_id.clone(), layers)
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-9)
}

/// Central differences of `f` at `x` along the given flat coordinates.
pub fn central_diff(x: &ArrayD<f64>, coords: &[usize], h: f64, mut f: impl FnMut(&ArrayD<f64>) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[i] += h;
            m.as_slice_mut().unwrap()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Up to `k` distinct coordinates out of `n`, chosen reproducibly.
pub fn pick(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut v: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Checks every array of `params` against central differences of `loss`,
/// sampling at most `per_array` coordinates each. Returns the worst relative
/// error and the name it occurred at.
pub fn check_param_grads(
    params: &ParamSet,
    grads: &ParamSet,
    per_array: usize,
    h: f64,
    seed: u64,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> (f64, String) {
    let mut r = rng(seed);
    let mut worst = (0.0, String::new());
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let x = params.get(&name).as_standard_layout().into_owned();
        let coords = pick(x.len(), per_array, &mut r);
        let numeric = central_diff(&x, &coords, h, |y| {
            let mut p = params.clone();
            p.get_mut(&name).assign(y);
            loss(&p)
        });
        let g = grads.get(&name).as_standard_layout().into_owned();
        let analytic: Vec<f64> = coords.iter().map(|&i| g.as_slice().unwrap()[i]).collect();
        let e = rel_err(&analytic, &numeric);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    worst
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut m = Array2::zeros((n, 2 * n));
    m.slice_mut(s![.., ..n]).assign(a);
    for i in 0..n {
        m[[i, n + i]] = 1.0;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[[x, col]].abs().total_cmp(&m[[y, col]].abs())).unwrap();
        for j in 0..2 * n {
            m.swap([col, j], [piv, j]);
        }
        let p = m[[col, col]];
        for j in 0..2 * n {
            m[[col, j]] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[[r, col]];
                for j in 0..2 * n {
                    m[[r, j]] -= f * m[[col, j]];
                }
            }
        }
    }
    m.slice(s![.., n..]).to_owned()
}

/// Denman–Beavers iteration for the principal square root.
pub fn sqrtm(a: &Array2<f64>) -> Array2<f64> {
    let mut y = a.clone();
    let mut z = Array2::eye(a.nrows());
    for _ in 0..60 {
        let yi = invert(&y);
        let zi = invert(&z);
        y = (&y + &zi) * 0.5;
        z = (&z + &yi) * 0.5;
    }
    y
}

pub fn frechet_oracle(ma: &Array1<f64>, ca: &Array2<f64>, mb: &Array1<f64>, cb: &Array2<f64>) -> f64 {
    let d = ma - mb;
    d.dot(&d) + ca.diag().sum() + cb.diag().sum() - 2.0 * sqrtm(&ca.dot(cb)).diag().sum()
}

/// Rows whose sample mean and unbiased covariance are exactly `mu`, `cov`.
pub fn gaussian_features(mu: &Array1<f64>, cov: &Array2<f64>, n: usize, seed: u64) -> Array2<f64> {
    let d = mu.len();
    let mut r = rng(seed);
    let z: Array2<f64> = randn((n, d), &mut r);
    let z = &z - &z.mean_axis(Axis(0)).unwrap();
    let s = z.t().dot(&z) / (n as f64 - 1.0);
    let whiten = invert(&chol(&s)).t().to_owned();
    let w = z.dot(&whiten);
    w.dot(&chol(cov).t()) + mu
}

pub fn chol(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            l[[i, j]] = if i == j { (a[[i, i]] - s).sqrt() } else { (a[[i, j]] - s) / l[[j, j]] };
        }
    }
    l
}
