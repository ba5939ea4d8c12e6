//! Adversarial auto-encoder objective and the alternating training loop.
//!
//! Each step first updates the latent discriminator to separate prior samples
//! from encoded codes, then updates the encoder and decoder on the
//! reconstruction loss plus the weighted adversarial term (encoder only).

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{dims, Error, Result};
use crate::feature::GramSet;
use crate::nn::{sigmoid, Adam, ParamSet};
use crate::wae::GramWae;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-6;

fn default_lambda() -> f64 {
    0.1
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    64
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.999
}
fn default_steps() -> usize {
    1000
}

/// Training hyperparameters. Deserializes from a flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lambda")]
    pub lambda_adv: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Total steps; a resumed run continues up to this count.
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    /// Per-layer reconstruction weights; all ones when absent.
    #[serde(default)]
    pub layer_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    /// Use `log(1 - D(E(x)))` for the encoder instead of `-log D(E(x))`.
    #[serde(default)]
    pub saturating_adv: bool,
    /// Write a snapshot every this many steps (0 disables).
    #[serde(default)]
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv >= 0.0) {
            return Err(Error::InvalidConfig("lambda_adv must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn weights(&self, layers: usize) -> Result<Vec<f64>> {
        match &self.layer_weights {
            None => Ok(vec![1.0; layers]),
            Some(w) if w.len() == layers => Ok(w.clone()),
            Some(w) => Err(Error::InvalidConfig(format!(
                "{} layer weights for {layers} layers",
                w.len()
            ))),
        }
    }
}

fn check_pairs(x: &[GramSet], x_hat: &[GramSet], w: &[f64]) -> Result<()> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(dims(format!("batches of {} and {} gram sets", x.len(), x_hat.len())));
    }
    for (a, b) in x.iter().zip(x_hat) {
        a.check_compatible(b)?;
        if a.len() != w.len() {
            return Err(dims(format!("{} weights for {} layers", w.len(), a.len())));
        }
    }
    Ok(())
}

/// `mean_b Σ_l w_l ‖G_l − Ĝ_l‖²_F`.
pub fn loss_rec(x: &[GramSet], x_hat: &[GramSet], w: &[f64]) -> Result<f64> {
    check_pairs(x, x_hat, w)?;
    let total: f64 = x
        .iter()
        .zip(x_hat)
        .map(|(a, b)| {
            a.matrices()
                .zip(b.matrices())
                .zip(w)
                .map(|((g, h), wl)| wl * (g - h).mapv(|d| d * d).sum())
                .sum::<f64>()
        })
        .sum();
    Ok(total / x.len() as f64)
}

/// Gradient of [`loss_rec`] with respect to each `Ĝ`.
pub fn loss_rec_grad(x: &[GramSet], x_hat: &[GramSet], w: &[f64]) -> Result<Vec<Vec<Array2<f64>>>> {
    check_pairs(x, x_hat, w)?;
    let scale = 2.0 / x.len() as f64;
    Ok(x.iter()
        .zip(x_hat)
        .map(|(a, b)| {
            a.matrices()
                .zip(b.matrices())
                .zip(w)
                .map(|((g, h), wl)| (h - g) * (scale * wl))
                .collect()
        })
        .collect())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn inside_clamp(p: f64) -> bool {
    (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p)
}

/// `E[log D(z_prior)] + E[log(1 − D(z_enc))]` from discriminator outputs.
pub fn loss_adv(d_prior: ArrayView1<f64>, d_enc: ArrayView1<f64>) -> Result<f64> {
    if d_prior.is_empty() || d_enc.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let a = d_prior.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / d_prior.len() as f64;
    let b = d_enc.iter().map(|&p| (1.0 - clamp_prob(p)).ln()).sum::<f64>() / d_enc.len() as f64;
    Ok(a + b)
}

/// [`loss_adv`] evaluated on logits, with its gradient for each logit.
pub fn loss_adv_logits(
    prior_logits: ArrayView1<f64>,
    enc_logits: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    let p = prior_logits.mapv(sigmoid);
    let q = enc_logits.mapv(sigmoid);
    let value = loss_adv(p.view(), q.view())?;
    let (np, nq) = (p.len() as f64, q.len() as f64);
    let dp = p.mapv(|s| if inside_clamp(s) { (1.0 - s) / np } else { 0.0 });
    let dq = q.mapv(|s| if inside_clamp(s) { -s / nq } else { 0.0 });
    Ok((value, dp, dq))
}

/// The encoder's adversarial term on logits of encoded codes, with gradient.
pub fn encoder_adv_logits(enc_logits: ArrayView1<f64>, saturating: bool) -> Result<(f64, Array1<f64>)> {
    if enc_logits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = enc_logits.len() as f64;
    let q = enc_logits.mapv(sigmoid);
    if saturating {
        let v = q.iter().map(|&s| (1.0 - clamp_prob(s)).ln()).sum::<f64>() / n;
        Ok((v, q.mapv(|s| if inside_clamp(s) { -s / n } else { 0.0 })))
    } else {
        let v = -q.iter().map(|&s| clamp_prob(s).ln()).sum::<f64>() / n;
        Ok((v, q.mapv(|s| if inside_clamp(s) { -(1.0 - s) / n } else { 0.0 })))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub rec: f64,
    pub adv: f64,
    pub dis: f64,
}

/// Model, optimizer moments, and the loss trace.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: GramWae,
    pub opt_encoder: Adam,
    pub opt_decoder: Adam,
    pub opt_discriminator: Adam,
    pub step: u64,
    pub trace: Vec<StepLosses>,
}

fn write_adam(c: &mut Container, prefix: &str, a: &Adam) {
    a.m.write_into(c, &format!("{prefix}/m/"));
    a.v.write_into(c, &format!("{prefix}/v/"));
}

fn read_adam(c: &Container, prefix: &str, params: &ParamSet, cfg: &TrainConfig, step: u64) -> Result<Adam> {
    let mut a = Adam::new(params, cfg.learning_rate, cfg.beta1, cfg.beta2);
    a.step = step;
    for name in params.names().map(str::to_owned).collect::<Vec<_>>() {
        a.m.get_mut(&name).assign(c.get(&format!("{prefix}/m/{name}"))?);
        a.v.get_mut(&name).assign(c.get(&format!("{prefix}/v/{name}"))?);
    }
    Ok(a)
}

impl TrainState {
    pub fn new(model: GramWae, cfg: &TrainConfig) -> Self {
        let adam = |p: &ParamSet| Adam::new(p, cfg.learning_rate, cfg.beta1, cfg.beta2);
        Self {
            opt_encoder: adam(&model.encoder),
            opt_decoder: adam(&model.decoder),
            opt_discriminator: adam(&model.discriminator),
            model,
            step: 0,
            trace: Vec::new(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = self.model.to_container()?;
        write_adam(&mut c, "adam/encoder", &self.opt_encoder);
        write_adam(&mut c, "adam/decoder", &self.opt_decoder);
        write_adam(&mut c, "adam/discriminator", &self.opt_discriminator);
        c.set_meta_json("step", &self.step)?;
        Ok(c)
    }

    /// Restores a checkpoint. Files without optimizer state start with fresh
    /// moments.
    pub fn from_container(c: &Container, cfg: &TrainConfig) -> Result<Self> {
        let model = GramWae::from_container(c)?;
        let step: u64 = c.meta_json("step").unwrap_or(0);
        let mut s = Self::new(model, cfg);
        s.step = step;
        if c.names().any(|n| n.starts_with("adam/")) {
            s.opt_encoder = read_adam(c, "adam/encoder", &s.model.encoder, cfg, step)?;
            s.opt_decoder = read_adam(c, "adam/decoder", &s.model.decoder, cfg, step)?;
            s.opt_discriminator = read_adam(c, "adam/discriminator", &s.model.discriminator, cfg, step)?;
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>, cfg: &TrainConfig) -> Result<Self> {
        Self::from_container(&Container::load(path)?, cfg)
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn select_batch(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if batch_size >= n {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, batch_size).into_vec();
    idx.sort_unstable();
    idx
}

fn prior_batch(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Gradients of one step, before any update is applied.
#[derive(Debug, Clone)]
pub struct StepGrads {
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub discriminator: ParamSet,
}

/// Discriminator gradient of `-L_adv` for the given encoded codes and prior
/// samples. Returns the loss value as well.
pub fn discriminator_grads(model: &GramWae, z_enc: &Array2<f64>, z_prior: &Array2<f64>) -> Result<(f64, ParamSet)> {
    let mut g = model.discriminator.zeros_like();
    let (lp, cp) = model.discriminator_logits(z_prior.view());
    let (le, ce) = model.discriminator_logits(z_enc.view());
    let (value, dp, dq) = loss_adv_logits(lp.view(), le.view())?;
    model.discriminator_backward(&cp, (-dp).view(), &mut g);
    model.discriminator_backward(&ce, (-dq).view(), &mut g);
    Ok((value, g))
}

/// Encoder and decoder gradients of `L_rec + λ·L_adv` (encoder) and `L_rec`
/// (decoder) on a fresh forward pass.
pub fn autoencoder_grads(
    model: &GramWae,
    batch: &[GramSet],
    cfg: &TrainConfig,
) -> Result<(f64, ParamSet, ParamSet)> {
    let w = cfg.weights(model.config().layer_spec.len())?;
    let (z, enc_cache) = model.encode_batch(batch)?;
    let (x_hat, dec_cache) = model.decode_batch(z.view())?;
    let rec = loss_rec(batch, &x_hat, &w)?;
    let d_hat = loss_rec_grad(batch, &x_hat, &w)?;
    let mut g_dec = model.decoder.zeros_like();
    let mut dz = model.decode_backward(&dec_cache, &d_hat, &mut g_dec);
    if cfg.lambda_adv > 0.0 {
        let (logits, cache) = model.discriminator_logits(z.view());
        let (_, dl) = encoder_adv_logits(logits.view(), cfg.saturating_adv)?;
        let mut scratch = model.discriminator.zeros_like();
        let dz_adv = model.discriminator_backward(&cache, dl.view(), &mut scratch);
        dz = dz + dz_adv * cfg.lambda_adv;
    }
    let mut g_enc = model.encoder.zeros_like();
    model.encode_backward(&enc_cache, dz.view(), &mut g_enc);
    Ok((rec, g_enc, g_dec))
}

/// One discriminator update followed by one encoder+decoder update.
///
/// On a non-finite loss or gradient the state is left unchanged.
pub fn train_step(state: &mut TrainState, data: &[GramSet], cfg: &TrainConfig) -> Result<StepLosses> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let step = state.step + 1;
    let mut rng = step_rng(cfg.seed, step);
    let idx = select_batch(data.len(), cfg.batch_size, &mut rng);
    let batch: Vec<GramSet> = idx.iter().map(|&i| data[i].clone()).collect();
    let z_prior = prior_batch(batch.len(), state.model.config().d_e, &mut rng);

    let (z_enc, _) = state.model.encode_batch(&batch)?;
    let (adv, g_dis) = discriminator_grads(&state.model, &z_enc, &z_prior)?;
    if !adv.is_finite() || !g_dis.all_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let saved_dis = (state.model.discriminator.clone(), state.opt_discriminator.clone());
    state
        .opt_discriminator
        .update(&mut state.model.discriminator, &g_dis);

    let result = autoencoder_grads(&state.model, &batch, cfg);
    let (rec, g_enc, g_dec) = match result {
        Ok(r) if r.0.is_finite() && r.1.all_finite() && r.2.all_finite() => r,
        other => {
            state.model.discriminator = saved_dis.0;
            state.opt_discriminator = saved_dis.1;
            other?;
            return Err(Error::NonFiniteLoss { step });
        }
    };
    state.opt_encoder.update(&mut state.model.encoder, &g_enc);
    state.opt_decoder.update(&mut state.model.decoder, &g_dec);
    state.step = step;
    let losses = StepLosses {
        step,
        rec,
        adv,
        dis: -adv,
    };
    state.trace.push(losses);
    Ok(losses)
}

/// Mean reconstruction loss of the model over a whole dataset.
pub fn evaluate_rec(model: &GramWae, data: &[GramSet], w: &[f64]) -> Result<f64> {
    let (z, _) = model.encode_batch(data)?;
    let (x_hat, _) = model.decode_batch(z.view())?;
    loss_rec(data, &x_hat, w)
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.safetensors")
    }

    pub fn losses(&self) -> PathBuf {
        self.dir.join("losses.csv")
    }

    pub fn snapshot(&self, step: u64) -> PathBuf {
        self.dir.join("snapshots").join(format!("step_{step:07}.safetensors"))
    }
}

fn open_trace(path: &Path, append: bool) -> Result<csv::Writer<File>> {
    let exists = append && path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(exists)
        .write(true)
        .truncate(!exists)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !exists {
        w.write_record(["step", "L_rec", "L_adv", "L_dis"])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(w)
}

/// Runs [`train_step`] until `cfg.max_steps`, writing the loss trace, periodic
/// snapshots and a final checkpoint when `out` is given. On divergence the
/// last good state is checkpointed before the error is returned.
pub fn train(mut state: TrainState, data: &[GramSet], cfg: &TrainConfig, out: Option<&TrainOutputs>) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut trace = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            Some(open_trace(&o.losses(), state.step > 0)?)
        }
        None => None,
    };
    while (state.step as usize) < cfg.max_steps {
        match train_step(&mut state, data, cfg) {
            Ok(l) => {
                if let Some(w) = trace.as_mut() {
                    w.serialize((l.step, l.rec, l.adv, l.dis))
                        .map_err(|e| Error::Format(e.to_string()))?;
                }
                if l.step % 100 == 0 {
                    log::info!("step {} L_rec {:.6e} L_adv {:.4}", l.step, l.rec, l.adv);
                }
                if let Some(o) = out {
                    if cfg.snapshot_every > 0 && l.step % cfg.snapshot_every as u64 == 0 {
                        state.save(o.snapshot(l.step))?;
                    }
                }
            }
            Err(e) => {
                if let Some(o) = out {
                    log::error!("training stopped: {e}; keeping checkpoint at step {}", state.step);
                    state.save(o.checkpoint())?;
                }
                return Err(e);
            }
        }
    }
    if let Some(w) = trace.as_mut() {
        w.flush().map_err(|e| Error::io("losses.csv", e))?;
    }
    if let Some(o) = out {
        state.save(o.checkpoint())?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::{GramLayer, LayerSpec};
    use crate::wae::ModelConfig;
    use ndarray::array;

    fn single(m: Array2<f64>) -> GramSet {
        GramSet::new("t", vec![GramLayer { id: "a".into(), matrix: m }])
    }

    #[test]
    fn rec_loss_basic_cases() {
        let x = single(array![[1.0, 2.0], [2.0, 3.0]]);
        assert_eq!(loss_rec(&[x.clone()], &[x.clone()], &[1.0]).unwrap(), 0.0);
        let y = single(array![[2.0, 3.0], [3.0, 4.0]]);
        assert_eq!(loss_rec(&[x], &[y], &[1.0]).unwrap(), 4.0);
    }

    #[test]
    fn adv_loss_at_one_half() {
        let h = Array1::from_elem(3, 0.5);
        let v = loss_adv(h.view(), h.view()).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let perfect = loss_adv(array![1.0].view(), array![0.0].view()).unwrap();
        assert!(perfect < 0.0 && perfect > -1e-5);
    }

    #[test]
    fn config_defaults_and_parse() {
        let d = TrainConfig::default();
        assert_eq!((d.lambda_adv, d.learning_rate, d.batch_size, d.beta1), (0.1, 1e-4, 64, 0.5));
        let c = TrainConfig::from_toml("lambda_adv = 0.0\nbatch_size = 4\nseed = 3").unwrap();
        assert_eq!((c.lambda_adv, c.batch_size, c.seed), (0.0, 4, 3));
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("lambda_adv = -1.0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let model = GramWae::new(ModelConfig::toy(LayerSpec::from_widths("t", &[2])), 1).unwrap();
        let enc = model.encoder.clone();
        let cfg = TrainConfig {
            max_steps: 0,
            ..Default::default()
        };
        let data = vec![single(array![[1.0, 0.0], [0.0, 1.0]])];
        let mut data = data;
        data[0].layers[0].id = "relu1_1".into();
        let s = train(TrainState::new(model, &cfg), &data, &cfg, None).unwrap();
        assert_eq!(s.model.encoder, enc);
        assert_eq!(s.step, 0);
    }
}
