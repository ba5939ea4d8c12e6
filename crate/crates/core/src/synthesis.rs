//! Texture rendering by pixel optimization against target Gram matrices.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{dims, Error, Result};
use crate::feature::{compute_gram, frobenius, gram_backward, Backbone, GramSet, MaskPyramid};
use crate::registry::Registry;

/// Target statistics and the output geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisTarget {
    pub grams: GramSet,
    /// One weight per layer; defaults to `1 / L`.
    pub weights: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Region the statistics are matched over; the whole image when `None`.
    pub mask: Option<Array2<bool>>,
}

impl SynthesisTarget {
    pub fn new(grams: GramSet, height: usize, width: usize) -> Self {
        let n = grams.len().max(1);
        Self {
            weights: vec![1.0 / n as f64; grams.len()],
            grams,
            height,
            width,
            mask: None,
        }
    }

    pub fn square(grams: GramSet, size: usize) -> Self {
        Self::new(grams, size, size)
    }
}

/// Loss value, pixel gradient and per-layer relative residuals.
#[derive(Debug, Clone)]
pub struct GramLoss {
    pub value: f64,
    pub gradient: Array3<f64>,
    /// `‖Gram_l(x) − Ĝ_l‖_F / ‖Ĝ_l‖_F`.
    pub relative_residuals: Vec<f64>,
}

/// `Σ_l w_l ‖Gram_l(image) − Ĝ_l‖²_F` and its gradient with respect to the
/// pixels, backpropagated through the frozen backbone.
pub fn gram_loss(backbone: &dyn Backbone, image: ArrayView3<f64>, target: &SynthesisTarget) -> Result<GramLoss> {
    let (ch, h, w) = image.dim();
    if ch != 3 || h != target.height || w != target.width {
        return Err(dims(format!(
            "image is {:?}, target expects (3, {}, {})",
            image.dim(),
            target.height,
            target.width
        )));
    }
    if target.weights.len() != target.grams.len() {
        return Err(dims(format!(
            "{} weights for {} layers",
            target.weights.len(),
            target.grams.len()
        )));
    }
    if target.grams.backbone_id != backbone.id() {
        return Err(Error::InvalidConfig(format!(
            "target grams come from backbone '{}', synthesis uses '{}'",
            target.grams.backbone_id,
            backbone.id()
        )));
    }
    let ids = target.grams.ids();
    let strides: Vec<usize> = ids
        .iter()
        .map(|id| {
            backbone
                .available_layers()
                .iter()
                .find(|l| &l.id == id)
                .map(|l| l.downsample)
                .ok_or_else(|| dims(format!("backbone has no layer '{id}'")))
        })
        .collect::<Result<_>>()?;
    let full = Array2::from_elem((h, w), true);
    let pyramid = MaskPyramid::build(target.mask.as_ref().unwrap_or(&full), &strides);

    let mut value = 0.0;
    let mut residuals = Vec::with_capacity(ids.len());
    let gradient = backbone.vjp(image, &ids, &mut |maps| {
        let mut out = Vec::with_capacity(maps.len());
        for (l, fm) in maps.iter().enumerate() {
            let mask = pyramid.masks[l].slice(s![..fm.height, ..fm.width]).to_owned();
            let mask = &mask;
            let goal = &target.grams.layers[l].matrix;
            let g = compute_gram(fm, mask)?;
            if g.dim() != goal.dim() {
                return Err(dims(format!("layer {} gram {:?} vs target {:?}", fm.layer_id, g.dim(), goal.dim())));
            }
            let diff = &g - goal;
            let wl = target.weights[l];
            value += wl * diff.mapv(|v| v * v).sum();
            residuals.push(frobenius(&diff) / frobenius(goal).max(f64::MIN_POSITIVE));
            out.push(gram_backward(fm, mask, (diff * (2.0 * wl)).view())?);
        }
        Ok(out)
    })?;
    Ok(GramLoss {
        value,
        gradient,
        relative_residuals: residuals,
    })
}

/// Objective over a flat pixel vector: value and gradient.
pub type Objective<'a> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

/// One row of the optimization trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iter: usize,
    pub loss: f64,
    pub best: f64,
}

#[derive(Debug, Clone)]
pub struct Minimized {
    pub x: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub trace: Vec<TracePoint>,
}

/// A bound-constrained minimizer over `[0, 1]^n`.
pub trait PixelOptimizer: Send + Sync {
    fn name(&self) -> &'static str;
    fn minimize(&self, f: &mut Objective, x0: Vec<f64>, max_iters: usize) -> Result<Minimized>;
}

fn clamp01(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Gradient with components zeroed where a bound is active and the gradient
/// points outward.
fn projected(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| if (xi <= 0.0 && gi > 0.0) || (xi >= 1.0 && gi < 0.0) { 0.0 } else { gi })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn check_finite(loss: f64, g: &[f64]) -> Result<()> {
    if loss.is_finite() && g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step: 0 })
    }
}

/// Limited-memory BFGS with a projected backtracking line search. When the
/// line search fails it falls back to projected gradient steps with a
/// decaying step size.
#[derive(Debug, Clone, Copy)]
pub struct Lbfgs {
    pub history: usize,
    pub max_backtracks: usize,
}

impl Default for Lbfgs {
    fn default() -> Self {
        Self {
            history: 10,
            max_backtracks: 20,
        }
    }
}

impl PixelOptimizer for Lbfgs {
    fn name(&self) -> &'static str {
        "lbfgs"
    }

    fn minimize(&self, f: &mut Objective, mut x: Vec<f64>, max_iters: usize) -> Result<Minimized> {
        clamp01(&mut x);
        let (mut fx, mut g) = f(&x)?;
        check_finite(fx, &g)?;
        let mut trace = vec![TracePoint { iter: 0, loss: fx, best: fx }];
        let mut mem: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
        let mut fallback_step = 0.0;
        let mut iterations = 0;
        while iterations < max_iters {
            let pg = projected(&x, &g);
            if fx == 0.0 || norm_inf(&pg) == 0.0 {
                break;
            }
            let free: Vec<bool> = x.iter().zip(&pg).map(|(_, &p)| p != 0.0).collect();

            // Two-loop recursion on the free coordinates.
            let mut q = pg.clone();
            let mut alphas = Vec::with_capacity(mem.len());
            for (s, y, rho) in mem.iter().rev() {
                let a = rho * dot(s, &q);
                for (qi, yi) in q.iter_mut().zip(y) {
                    *qi -= a * yi;
                }
                alphas.push(a);
            }
            let gamma = mem.last().map_or(1.0 / norm_inf(&pg).max(1e-300), |(s, y, _)| dot(s, y) / dot(y, y));
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
            for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
                let b = rho * dot(y, &q);
                for (qi, si) in q.iter_mut().zip(s) {
                    *qi += (a - b) * si;
                }
            }
            let mut d: Vec<f64> = q.iter().zip(&free).map(|(&v, &fr)| if fr { -v } else { 0.0 }).collect();
            if dot(&d, &pg) >= 0.0 {
                mem.clear();
                let scale = 1.0 / norm_inf(&pg);
                d = pg.iter().map(|v| -v * scale).collect();
            }

            let mut accepted = None;
            let mut step = 1.0;
            for _ in 0..self.max_backtracks {
                let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
                clamp01(&mut xn);
                let moved: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let decrease = dot(&pg, &moved);
                let (fn_, gn) = f(&xn)?;
                if fn_.is_finite() && decrease < 0.0 && fn_ <= fx + 1e-4 * decrease {
                    check_finite(fn_, &gn)?;
                    accepted = Some((xn, fn_, gn));
                    break;
                }
                if !fn_.is_finite() && step < 1e-12 {
                    return Err(Error::NonFiniteLoss { step: iterations as u64 });
                }
                step *= 0.5;
            }
            if accepted.is_none() {
                // First-order fallback with step decay.
                mem.clear();
                if fallback_step == 0.0 {
                    fallback_step = 0.1 / norm_inf(&pg);
                }
                for _ in 0..self.max_backtracks {
                    let mut xn: Vec<f64> = x.iter().zip(&pg).map(|(a, b)| a - fallback_step * b).collect();
                    clamp01(&mut xn);
                    let (fn_, gn) = f(&xn)?;
                    if fn_.is_finite() && fn_ < fx {
                        check_finite(fn_, &gn)?;
                        accepted = Some((xn, fn_, gn));
                        break;
                    }
                    fallback_step *= 0.5;
                }
            }
            let Some((xn, fn_, gn)) = accepted else {
                log::debug!("no descent step found after {iterations} iterations; stopping");
                break;
            };
            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
                mem.push((s, y, 1.0 / sy));
                if mem.len() > self.history {
                    mem.remove(0);
                }
            }
            x = xn;
            fx = fn_;
            g = gn;
            iterations += 1;
            trace.push(TracePoint {
                iter: iterations,
                loss: fx,
                best: fx,
            });
        }
        Ok(Minimized {
            x,
            loss: fx,
            iterations,
            trace,
        })
    }
}

/// Projected Adam; returns the best iterate seen.
#[derive(Debug, Clone, Copy)]
pub struct PixelAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for PixelAdam {
    fn default() -> Self {
        Self {
            lr: 0.02,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl PixelOptimizer for PixelAdam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn minimize(&self, f: &mut Objective, mut x: Vec<f64>, max_iters: usize) -> Result<Minimized> {
        clamp01(&mut x);
        let (mut fx, mut g) = f(&x)?;
        check_finite(fx, &g)?;
        let mut best = (x.clone(), fx);
        let mut trace = vec![TracePoint { iter: 0, loss: fx, best: fx }];
        let mut m = vec![0.0; x.len()];
        let mut v = vec![0.0; x.len()];
        for t in 1..=max_iters {
            if fx == 0.0 {
                break;
            }
            let c1 = 1.0 - self.beta1.powi(t as i32);
            let c2 = 1.0 - self.beta2.powi(t as i32);
            for i in 0..x.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                x[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
            }
            clamp01(&mut x);
            (fx, g) = f(&x)?;
            check_finite(fx, &g)?;
            if fx < best.1 {
                best = (x.clone(), fx);
            }
            trace.push(TracePoint {
                iter: t,
                loss: fx,
                best: best.1,
            });
        }
        let iterations = trace.len() - 1;
        Ok(Minimized {
            x: best.0,
            loss: best.1,
            iterations,
            trace,
        })
    }
}

pub fn optimizer_registry() -> Registry<dyn PixelOptimizer> {
    let mut reg: Registry<dyn PixelOptimizer> = Registry::new("optimizer");
    reg.register("lbfgs", Box::new(Lbfgs::default()));
    reg.register("adam", Box::new(PixelAdam::default()));
    reg
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitImage {
    WhiteNoise,
    Image(Array3<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOptions {
    pub init: InitImage,
    pub max_iters: usize,
    pub seed: u64,
    pub optimizer: String,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            init: InitImage::WhiteNoise,
            max_iters: 500,
            seed: 0,
            optimizer: "lbfgs".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    /// Pixels in `[0, 1]`, `(3, H, W)`.
    pub image: Array3<f64>,
    /// Loss evaluated at `image`.
    pub loss: f64,
    pub initial_loss: f64,
    pub relative_residuals: Vec<f64>,
    pub iterations: usize,
    pub trace: Vec<TracePoint>,
    /// Times optimization restarted from fresh noise after a non-finite loss.
    pub restarts: usize,
}

impl SynthesisResult {
    /// Writes `iter,loss,best` rows.
    pub fn write_trace(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record(["iter", "loss", "best"]).map_err(|e| Error::Format(e.to_string()))?;
        for p in &self.trace {
            w.serialize((p.iter, p.loss, p.best)).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn noise(h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(0.0, 1.0).expect("valid range");
    Array3::from_shape_simple_fn((3, h, w), || u.sample(&mut rng))
}

/// Renders an image whose Gram statistics match `target`.
pub fn synthesize(backbone: &dyn Backbone, target: &SynthesisTarget, opts: &SynthesisOptions) -> Result<SynthesisResult> {
    let shape = (3, target.height, target.width);
    let optimizer = optimizer_registry();
    let optimizer = optimizer.get(&opts.optimizer)?;
    let start = match &opts.init {
        InitImage::WhiteNoise => noise(target.height, target.width, opts.seed),
        InitImage::Image(img) => {
            if img.dim() != shape {
                return Err(dims(format!("init image {:?}, expected {shape:?}", img.dim())));
            }
            img.mapv(|v| v.clamp(0.0, 1.0))
        }
    };

    let run = |x0: &Array3<f64>| -> Result<(Minimized, f64)> {
        let mut objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let img = Array3::from_shape_vec(shape, x.to_vec()).expect("pixel count");
            let l = gram_loss(backbone, img.view(), target)?;
            Ok((l.value, l.gradient.as_standard_layout().iter().copied().collect()))
        };
        let x = x0.as_standard_layout().iter().copied().collect();
        let out = optimizer.minimize(&mut objective, x, opts.max_iters)?;
        let initial = out.trace.first().map_or(f64::NAN, |p| p.loss);
        Ok((out, initial))
    };

    let mut restarts = 0;
    let (out, initial) = match run(&start) {
        Err(Error::NonFiniteLoss { .. }) => {
            log::warn!("non-finite synthesis loss; restarting from fresh noise");
            restarts = 1;
            let fresh = noise(target.height, target.width, opts.seed.wrapping_add(1));
            run(&fresh).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step: 0 },
                other => other,
            })?
        }
        other => other?,
    };
    let image = Array3::from_shape_vec(shape, out.x).expect("pixel count");
    let last = gram_loss(backbone, image.view(), target)?;
    Ok(SynthesisResult {
        image,
        loss: last.value,
        initial_loss: initial,
        relative_residuals: last.relative_residuals,
        iterations: out.iterations,
        trace: out.trace,
        restarts,
    })
}
