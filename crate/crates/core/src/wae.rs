//! Recursive auto-encoder over transformed Gram vectors, plus the latent
//! discriminator.
//!
//! The encoder turns each layer's Gram matrix into a vector with a
//! [`GramTransform`], then folds the vectors into a hidden state from the
//! shallowest layer to the deepest with residual recursive units. The decoder
//! mirrors it, unfolding from the deepest layer back to the shallowest and
//! emitting one Gram matrix per step.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{dims, Error, Result};
use crate::feature::{BackboneConfig, GramLayer, GramSet, LayerSpec};
use crate::nn::{
    affine, affine_backward, affine_specs, concat_cols, count_params, sigmoid, Init, Mlp, MlpCache,
    ParamSet, ParamSpec,
};
use crate::registry::Registry;
use crate::transform::{clip_to_psd, transform_registry, GramTransform, DEFAULT_D_MULTIPLIER};

fn default_d_e() -> usize {
    128
}
fn default_d_r() -> usize {
    512
}
fn default_r() -> usize {
    2
}
fn default_d_v() -> usize {
    128
}
fn default_d_dis() -> usize {
    512
}
fn default_dis_layers() -> usize {
    4
}
fn default_transform() -> String {
    "g2v".into()
}
fn default_trunk() -> String {
    "recursive".into()
}
fn default_multiplier() -> usize {
    DEFAULT_D_MULTIPLIER
}

/// Architecture of the auto-encoder and discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layer_spec: LayerSpec,
    /// Latent code width.
    #[serde(default = "default_d_e")]
    pub d_e: usize,
    /// Hidden state width of the recursive trunk.
    #[serde(default = "default_d_r")]
    pub d_r: usize,
    /// Affine layers per recursive unit.
    #[serde(default = "default_r")]
    pub r: usize,
    /// Width of each transformed Gram vector.
    #[serde(default = "default_d_v")]
    pub d_v: usize,
    #[serde(default = "default_d_dis")]
    pub d_dis: usize,
    /// Affine layers in the discriminator, including the output layer.
    #[serde(default = "default_dis_layers")]
    pub dis_layers: usize,
    #[serde(default = "default_transform")]
    pub transform: String,
    #[serde(default = "default_trunk")]
    pub trunk: String,
    /// Projection vectors per channel in the `g2v` transform.
    #[serde(default = "default_multiplier")]
    pub d_multiplier: usize,
    /// Clip decoded Gram matrices to the PSD cone (inference only).
    #[serde(default)]
    pub psd_clip: bool,
    /// Backbone the training Grams were extracted with; attached to decoded
    /// Gram sets so they can be rendered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneConfig>,
}

impl ModelConfig {
    pub fn new(layer_spec: LayerSpec) -> Self {
        Self {
            layer_spec,
            d_e: default_d_e(),
            d_r: default_d_r(),
            r: default_r(),
            d_v: default_d_v(),
            d_dis: default_d_dis(),
            dis_layers: default_dis_layers(),
            transform: default_transform(),
            trunk: default_trunk(),
            d_multiplier: default_multiplier(),
            psd_clip: false,
            backbone: None,
        }
    }

    /// A small configuration for tests and desk-scale runs.
    pub fn toy(layer_spec: LayerSpec) -> Self {
        Self {
            d_e: 8,
            d_r: 16,
            d_v: 8,
            d_dis: 16,
            ..Self::new(layer_spec)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_spec.is_empty() {
            return Err(Error::EmptyLayerSpec);
        }
        let zero = [
            ("d_e", self.d_e),
            ("d_r", self.d_r),
            ("r", self.r),
            ("d_v", self.d_v),
            ("d_dis", self.d_dis),
            ("dis_layers", self.dis_layers),
            ("d_multiplier", self.d_multiplier),
        ]
        .into_iter()
        .find(|(_, v)| *v == 0);
        if let Some((name, _)) = zero {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        transform_registry().get(&self.transform)?;
        trunk_registry().get(&self.trunk)?;
        Ok(())
    }

    fn layer_ids(&self) -> Vec<String> {
        self.layer_spec.ids()
    }
}

/// Residual block `h' = h + A_r(ρ(…A_1(ρ([h; v]))))`.
#[derive(Debug, Clone)]
pub struct RecursiveUnit {
    mlp: Mlp,
    d_r: usize,
}

impl RecursiveUnit {
    pub fn new(prefix: impl Into<String>, d_r: usize, d_v: usize, r: usize) -> Self {
        let mut widths = vec![d_r + d_v];
        widths.extend(std::iter::repeat_n(d_r, r));
        Self {
            mlp: Mlp::new(prefix, widths, vec![true; r]),
            d_r,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.mlp.specs()
    }

    pub fn forward(&self, p: &ParamSet, h: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if h.ncols() != self.d_r || v.ncols() + self.d_r != self.mlp.widths[0] || h.nrows() != v.nrows() {
            return Err(dims(format!(
                "recursive unit expects h of width {} and v of width {}, got {:?} and {:?}",
                self.d_r,
                self.mlp.widths[0] - self.d_r,
                h.dim(),
                v.dim()
            )));
        }
        let (y, cache) = self.mlp.forward(p, concat_cols(h, v).view());
        Ok((&h + &y, cache))
    }

    /// Returns `(dh, dv)`.
    pub fn backward(
        &self,
        p: &ParamSet,
        cache: &MlpCache,
        dh_out: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> (Array2<f64>, Array2<f64>) {
        let dx = self.mlp.backward(p, cache, dh_out, grads);
        let dh = &dh_out + &dx.slice(s![.., ..self.d_r]);
        (dh, dx.slice(s![.., self.d_r..]).to_owned())
    }
}

/// `ru_forward` for a single hidden vector.
pub fn ru_forward(p: &ParamSet, unit: &RecursiveUnit, h: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let (out, _) = unit.forward(p, h.insert_axis(Axis(0)), v.insert_axis(Axis(0)))?;
    Ok(out.row(0).to_owned())
}

/// Intermediate values a trunk keeps for its backward pass.
#[derive(Debug, Clone, Default)]
pub struct TrunkCache {
    hidden: Vec<Array2<f64>>,
    mlps: Vec<MlpCache>,
    input: Option<Array2<f64>>,
}

/// The part of the model between transformed Gram vectors and the latent code.
pub trait Trunk: Send + Sync {
    fn name(&self) -> &'static str;
    fn encoder_specs(&self, cfg: &ModelConfig) -> Vec<ParamSpec>;
    fn decoder_specs(&self, cfg: &ModelConfig) -> Vec<ParamSpec>;
    /// `vs[l]` is the `(batch, d_v)` block for layer `l` in spec order.
    fn encode(&self, cfg: &ModelConfig, p: &ParamSet, vs: &[Array2<f64>]) -> Result<(Array2<f64>, TrunkCache)>;
    fn encode_backward(
        &self,
        cfg: &ModelConfig,
        p: &ParamSet,
        cache: &TrunkCache,
        dz: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> Vec<Array2<f64>>;
    /// Returns per-layer vectors in spec order.
    fn decode(&self, cfg: &ModelConfig, p: &ParamSet, z: ArrayView2<f64>) -> Result<(Vec<Array2<f64>>, TrunkCache)>;
    fn decode_backward(
        &self,
        cfg: &ModelConfig,
        p: &ParamSet,
        cache: &TrunkCache,
        dvs: &[Array2<f64>],
        grads: &mut ParamSet,
    ) -> Array2<f64>;
}

/// Bottom-up / top-down chains of recursive units.
#[derive(Debug, Clone, Copy)]
pub struct RecursiveTrunk;

impl RecursiveTrunk {
    fn unit(cfg: &ModelConfig, layer: &str) -> RecursiveUnit {
        RecursiveUnit::new(format!("ru/{layer}"), cfg.d_r, cfg.d_v, cfg.r)
    }
}

impl Trunk for RecursiveTrunk {
    fn name(&self) -> &'static str {
        "recursive"
    }

    fn encoder_specs(&self, cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = vec![ParamSpec::new("h0", &[cfg.d_r], Init::Zeros)];
        for id in cfg.layer_ids() {
            specs.extend(Self::unit(cfg, &id).specs());
        }
        specs.extend(affine_specs("head", cfg.d_r, cfg.d_e));
        specs
    }

    fn decoder_specs(&self, cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = affine_specs("head", cfg.d_e, cfg.d_r);
        for id in cfg.layer_ids().iter().rev() {
            specs.extend(affine_specs(&format!("branch/{id}"), cfg.d_r, cfg.d_v));
            specs.extend(Self::unit(cfg, id).specs());
        }
        specs
    }

    fn encode(&self, cfg: &ModelConfig, p: &ParamSet, vs: &[Array2<f64>]) -> Result<(Array2<f64>, TrunkCache)> {
        let batch = vs.first().map_or(0, |v| v.nrows());
        let mut h = p
            .vec("h0")
            .insert_axis(Axis(0))
            .broadcast((batch, cfg.d_r))
            .expect("broadcast")
            .to_owned();
        let mut cache = TrunkCache::default();
        for (id, v) in cfg.layer_ids().iter().zip(vs) {
            let (next, c) = Self::unit(cfg, id).forward(p, h.view(), v.view())?;
            cache.hidden.push(h);
            cache.mlps.push(c);
            h = next;
        }
        let z = affine(p, "head", h.view());
        cache.hidden.push(h);
        Ok((z, cache))
    }

    fn encode_backward(
        &self,
        cfg: &ModelConfig,
        p: &ParamSet,
        cache: &TrunkCache,
        dz: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> Vec<Array2<f64>> {
        let ids = cfg.layer_ids();
        let mut dh = affine_backward(p, grads, "head", cache.hidden[ids.len()].view(), dz);
        let mut dvs = vec![Array2::zeros((0, 0)); ids.len()];
        for l in (0..ids.len()).rev() {
            let (dh_prev, dv) = Self::unit(cfg, &ids[l]).backward(p, &cache.mlps[l], dh.view(), grads);
            dvs[l] = dv;
            dh = dh_prev;
        }
        grads.accumulate("h0", &dh.sum_axis(Axis(0)));
        dvs
    }

    fn decode(&self, cfg: &ModelConfig, p: &ParamSet, z: ArrayView2<f64>) -> Result<(Vec<Array2<f64>>, TrunkCache)> {
        if z.ncols() != cfg.d_e {
            return Err(dims(format!("latent code of width {}, expected {}", z.ncols(), cfg.d_e)));
        }
        let ids = cfg.layer_ids();
        let mut h = affine(p, "head", z);
        let mut cache = TrunkCache {
            input: Some(z.to_owned()),
            ..Default::default()
        };
        let mut vs = vec![Array2::zeros((0, 0)); ids.len()];
        for l in (0..ids.len()).rev() {
            let v = affine(p, &format!("branch/{}", ids[l]), h.view());
            let (next, c) = Self::unit(cfg, &ids[l]).forward(p, h.view(), v.view())?;
            cache.hidden.push(h);
            cache.mlps.push(c);
            vs[l] = v;
            h = next;
        }
        Ok((vs, cache))
    }

    fn decode_backward(
        &self,
        cfg: &ModelConfig,
        p: &ParamSet,
        cache: &TrunkCache,
        dvs: &[Array2<f64>],
        grads: &mut ParamSet,
    ) -> Array2<f64> {
        let ids = cfg.layer_ids();
        let n = ids.len();
        let batch = dvs[0].nrows();
        let mut dh = Array2::zeros((batch, cfg.d_r));
        // Step `t` of the forward pass handled layer `n - 1 - t`.
        for t in (0..n).rev() {
            let l = n - 1 - t;
            let (dh_prev, dv_ru) = Self::unit(cfg, &ids[l]).backward(p, &cache.mlps[t], dh.view(), grads);
            let dv = &dvs[l] + &dv_ru;
            let h = &cache.hidden[t];
            dh = dh_prev + affine_backward(p, grads, &format!("branch/{}", ids[l]), h.view(), dv.view());
        }
        let z = cache.input.as_ref().expect("decode cache");
        affine_backward(p, grads, "head", z.view(), dh.view())
    }
}

/// Ablation: a plain MLP over the concatenation of all layer vectors.
#[derive(Debug, Clone, Copy)]
pub struct MlpTrunk;

impl MlpTrunk {
    fn encoder(cfg: &ModelConfig) -> Mlp {
        let n = cfg.layer_spec.len();
        let mut widths = vec![n * cfg.d_v];
        widths.extend(std::iter::repeat_n(cfg.d_r, cfg.r));
        widths.push(cfg.d_e);
        let mut relu = vec![false];
        relu.extend(std::iter::repeat_n(true, cfg.r));
        Mlp::new("mlp", widths, relu)
    }

    fn decoder(cfg: &ModelConfig) -> Mlp {
        let n = cfg.layer_spec.len();
        let mut widths = vec![cfg.d_e];
        widths.extend(std::iter::repeat_n(cfg.d_r, cfg.r));
        widths.push(n * cfg.d_v);
        let mut relu = vec![false];
        relu.extend(std::iter::repeat_n(true, cfg.r));
        Mlp::new("mlp", widths, relu)
    }
}

impl Trunk for MlpTrunk {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn encoder_specs(&self, cfg: &ModelConfig) -> Vec<ParamSpec> {
        Self::encoder(cfg).specs()
    }

    fn decoder_specs(&self, cfg: &ModelConfig) -> Vec<ParamSpec> {
        Self::decoder(cfg).specs()
    }

    fn encode(&self, cfg: &ModelConfig, p: &ParamSet, vs: &[Array2<f64>]) -> Result<(Array2<f64>, TrunkCache)> {
        let views: Vec<_> = vs.iter().map(|v| v.view()).collect();
        let x = ndarray::concatenate(Axis(1), &views).map_err(|e| dims(e.to_string()))?;
        let (z, c) = Self::encoder(cfg).forward(p, x.view());
        Ok((
            z,
            TrunkCache {
                mlps: vec![c],
                ..Default::default()
            },
        ))
    }

    fn encode_backward(
        &self,
        cfg: &ModelConfig,
        p: &ParamSet,
        cache: &TrunkCache,
        dz: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> Vec<Array2<f64>> {
        let dx = Self::encoder(cfg).backward(p, &cache.mlps[0], dz, grads);
        (0..cfg.layer_spec.len())
            .map(|l| dx.slice(s![.., l * cfg.d_v..(l + 1) * cfg.d_v]).to_owned())
            .collect()
    }

    fn decode(&self, cfg: &ModelConfig, p: &ParamSet, z: ArrayView2<f64>) -> Result<(Vec<Array2<f64>>, TrunkCache)> {
        if z.ncols() != cfg.d_e {
            return Err(dims(format!("latent code of width {}, expected {}", z.ncols(), cfg.d_e)));
        }
        let (x, c) = Self::decoder(cfg).forward(p, z);
        let vs = (0..cfg.layer_spec.len())
            .map(|l| x.slice(s![.., l * cfg.d_v..(l + 1) * cfg.d_v]).to_owned())
            .collect();
        Ok((
            vs,
            TrunkCache {
                mlps: vec![c],
                ..Default::default()
            },
        ))
    }

    fn decode_backward(
        &self,
        cfg: &ModelConfig,
        p: &ParamSet,
        cache: &TrunkCache,
        dvs: &[Array2<f64>],
        grads: &mut ParamSet,
    ) -> Array2<f64> {
        let views: Vec<_> = dvs.iter().map(|v| v.view()).collect();
        let dx = ndarray::concatenate(Axis(1), &views).expect("same batch");
        Self::decoder(cfg).backward(p, &cache.mlps[0], dx.view(), grads)
    }
}

pub type TrunkFactory = dyn Fn() -> Box<dyn Trunk> + Send + Sync;

pub fn trunk_registry() -> Registry<TrunkFactory> {
    let mut reg: Registry<TrunkFactory> = Registry::new("trunk");
    reg.register("recursive", Box::new(|| Box::new(RecursiveTrunk) as Box<dyn Trunk>));
    reg.register("mlp", Box::new(|| Box::new(MlpTrunk) as Box<dyn Trunk>));
    reg
}

fn discriminator_mlp(cfg: &ModelConfig) -> Mlp {
    let mut widths = vec![cfg.d_e];
    widths.extend(std::iter::repeat_n(cfg.d_dis, cfg.dis_layers - 1));
    widths.push(1);
    let mut relu = vec![false];
    relu.extend(std::iter::repeat_n(true, cfg.dis_layers - 1));
    Mlp::new("fc", widths, relu)
}

/// Parameter totals per network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub encoder: usize,
    pub decoder: usize,
    pub discriminator: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    grams: Vec<Vec<Array2<f64>>>,
    trunk: TrunkCache,
}

#[derive(Debug, Clone)]
pub struct DecodeCache {
    vs: Vec<Array2<f64>>,
    trunk: TrunkCache,
}

/// Encoder, decoder and latent discriminator with their parameters.
pub struct GramWae {
    config: ModelConfig,
    transform: Box<dyn GramTransform>,
    trunk: Box<dyn Trunk>,
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub discriminator: ParamSet,
}

impl std::fmt::Debug for GramWae {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GramWae")
            .field("config", &self.config)
            .field("params", &self.param_count())
            .finish()
    }
}

impl Clone for GramWae {
    fn clone(&self) -> Self {
        let mut m = Self::zeros(self.config.clone()).expect("validated config");
        m.encoder = self.encoder.clone();
        m.decoder = self.decoder.clone();
        m.discriminator = self.discriminator.clone();
        m
    }
}

impl GramWae {
    fn parts(config: &ModelConfig) -> Result<(Box<dyn GramTransform>, Box<dyn Trunk>)> {
        config.validate()?;
        let transform = transform_registry().get(&config.transform)?(config.d_multiplier);
        let trunk = trunk_registry().get(&config.trunk)?();
        Ok((transform, trunk))
    }

    fn specs_for(config: &ModelConfig, transform: &dyn GramTransform, trunk: &dyn Trunk) -> [Vec<ParamSpec>; 3] {
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for l in &config.layer_spec.layers {
            enc.extend(transform.encoder_specs(&l.id, l.channels, config.d_v));
            dec.extend(transform.decoder_specs(&l.id, l.channels, config.d_v));
        }
        enc.extend(trunk.encoder_specs(config));
        dec.extend(trunk.decoder_specs(config));
        [enc, dec, discriminator_mlp(config).specs()]
    }

    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (transform, trunk) = Self::parts(&config)?;
        let [e, d, x] = Self::specs_for(&config, transform.as_ref(), trunk.as_ref());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            encoder: ParamSet::init(&e, &mut rng),
            decoder: ParamSet::init(&d, &mut rng),
            discriminator: ParamSet::init(&x, &mut rng),
            config,
            transform,
            trunk,
        })
    }

    /// Model with every parameter set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let (transform, trunk) = Self::parts(&config)?;
        let [e, d, x] = Self::specs_for(&config, transform.as_ref(), trunk.as_ref());
        Ok(Self {
            encoder: ParamSet::zeros(&e),
            decoder: ParamSet::zeros(&d),
            discriminator: ParamSet::zeros(&x),
            config,
            transform,
            trunk,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> [Vec<ParamSpec>; 3] {
        Self::specs_for(&self.config, self.transform.as_ref(), self.trunk.as_ref())
    }

    pub fn param_count(&self) -> ParamCount {
        count_model_params(&self.config).expect("validated config")
    }

    fn check_input(&self, x: &GramSet) -> Result<()> {
        let spec = &self.config.layer_spec;
        if x.ids() != spec.ids() || x.channel_counts() != spec.channel_counts() {
            return Err(dims(format!(
                "gram set layers {:?} with channels {:?} do not match the model's {:?} / {:?}",
                x.ids(),
                x.channel_counts(),
                spec.ids(),
                spec.channel_counts()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &GramSet) -> Result<Array1<f64>> {
        let (z, _) = self.encode_batch(std::slice::from_ref(x))?;
        Ok(z.row(0).to_owned())
    }

    /// Latent codes as rows of a `(batch, d_e)` matrix.
    pub fn encode_batch(&self, xs: &[GramSet]) -> Result<(Array2<f64>, EncodeCache)> {
        if xs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let ids = self.config.layer_ids();
        let mut vs = vec![Array2::zeros((xs.len(), self.config.d_v)); ids.len()];
        for (b, x) in xs.iter().enumerate() {
            self.check_input(x)?;
            for (l, layer) in x.layers.iter().enumerate() {
                let v = self.transform.encode(&self.encoder, &ids[l], layer.matrix.view())?;
                vs[l].row_mut(b).assign(&v);
            }
        }
        let (z, trunk) = self.trunk.encode(&self.config, &self.encoder, &vs)?;
        let grams = xs
            .iter()
            .map(|x| x.layers.iter().map(|l| l.matrix.clone()).collect())
            .collect();
        Ok((z, EncodeCache { grams, trunk }))
    }

    /// Accumulates encoder gradients for `dL/dz`; returns `dL/dG` per sample
    /// and layer.
    pub fn encode_backward(&self, cache: &EncodeCache, dz: ArrayView2<f64>, grads: &mut ParamSet) -> Vec<Vec<Array2<f64>>> {
        let dvs = self.trunk.encode_backward(&self.config, &self.encoder, &cache.trunk, dz, grads);
        let ids = self.config.layer_ids();
        cache
            .grams
            .iter()
            .enumerate()
            .map(|(b, gs)| {
                gs.iter()
                    .enumerate()
                    .map(|(l, g)| {
                        self.transform
                            .encode_backward(&self.encoder, grads, &ids[l], g.view(), dvs[l].row(b))
                    })
                    .collect()
            })
            .collect()
    }

    fn to_gram_set(&self, matrices: Vec<Array2<f64>>) -> GramSet {
        let layers = self
            .config
            .layer_ids()
            .into_iter()
            .zip(matrices)
            .map(|(id, matrix)| GramLayer { id, matrix })
            .collect();
        let mut g = GramSet::new(self.config.layer_spec.backbone_id.clone(), layers);
        g.backbone = self.config.backbone.clone();
        g
    }

    /// Decodes one latent code, applying the PSD clip when configured.
    pub fn decode(&self, z: ArrayView1<f64>) -> Result<GramSet> {
        let (mut out, _) = self.decode_batch(z.insert_axis(Axis(0)))?;
        let mut g = out.pop().expect("one sample");
        if self.config.psd_clip {
            for l in &mut g.layers {
                l.matrix = clip_to_psd(l.matrix.view());
            }
        }
        Ok(g)
    }

    pub fn decode_batch(&self, z: ArrayView2<f64>) -> Result<(Vec<GramSet>, DecodeCache)> {
        let (vs, trunk) = self.trunk.decode(&self.config, &self.decoder, z)?;
        let ids = self.config.layer_ids();
        let mut out = Vec::with_capacity(z.nrows());
        for b in 0..z.nrows() {
            let mats = ids
                .iter()
                .enumerate()
                .map(|(l, id)| self.transform.decode(&self.decoder, id, vs[l].row(b)))
                .collect::<Result<Vec<_>>>()?;
            out.push(self.to_gram_set(mats));
        }
        Ok((out, DecodeCache { vs, trunk }))
    }

    /// `d_grams[b][l]` is `dL/dĜ` for sample `b`, layer `l`. Returns `dL/dz`.
    pub fn decode_backward(&self, cache: &DecodeCache, d_grams: &[Vec<Array2<f64>>], grads: &mut ParamSet) -> Array2<f64> {
        let ids = self.config.layer_ids();
        let mut dvs: Vec<Array2<f64>> = cache.vs.iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        for (b, dg) in d_grams.iter().enumerate() {
            for (l, id) in ids.iter().enumerate() {
                let dv = self
                    .transform
                    .decode_backward(&self.decoder, grads, id, cache.vs[l].row(b), dg[l].view());
                dvs[l].row_mut(b).assign(&dv);
            }
        }
        self.trunk.decode_backward(&self.config, &self.decoder, &cache.trunk, &dvs, grads)
    }

    /// Discriminator logits for a batch of codes.
    pub fn discriminator_logits(&self, z: ArrayView2<f64>) -> (Array1<f64>, MlpCache) {
        let (out, cache) = discriminator_mlp(&self.config).forward(&self.discriminator, z);
        (out.column(0).to_owned(), cache)
    }

    /// Accumulates discriminator gradients; returns `dL/dz`.
    pub fn discriminator_backward(&self, cache: &MlpCache, d_logits: ArrayView1<f64>, grads: &mut ParamSet) -> Array2<f64> {
        let dy = d_logits.insert_axis(Axis(1));
        discriminator_mlp(&self.config).backward(&self.discriminator, cache, dy, grads)
    }

    /// Probability that `z` was drawn from the prior.
    pub fn discriminate(&self, z: ArrayView1<f64>) -> Result<f64> {
        if z.len() != self.config.d_e {
            return Err(dims(format!("latent code of width {}, expected {}", z.len(), self.config.d_e)));
        }
        let (logit, _) = self.discriminator_logits(z.insert_axis(Axis(0)));
        Ok(sigmoid(logit[0]))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        self.encoder.write_into(&mut c, "encoder/");
        self.decoder.write_into(&mut c, "decoder/");
        self.discriminator.write_into(&mut c, "discriminator/");
        c.set_meta_json("d_e", &self.config.d_e)?;
        c.set_meta_json("d_r", &self.config.d_r)?;
        c.set_meta_json("r", &self.config.r)?;
        c.set_meta_json("layer_spec", &self.config.layer_spec)?;
        c.set_meta_json("D_rule", &format!("D = {} * C", self.config.d_multiplier))?;
        c.set_meta_json("model_config", &self.config)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ModelConfig = c.meta_json("model_config")?;
        let mut m = Self::zeros(config)?;
        let [e, d, x] = m.specs();
        m.encoder = ParamSet::read_from(c, "encoder/", &e)?;
        m.decoder = ParamSet::read_from(c, "decoder/", &d)?;
        m.discriminator = ParamSet::read_from(c, "discriminator/", &x)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Parameter totals for a configuration without allocating the model.
pub fn count_model_params(config: &ModelConfig) -> Result<ParamCount> {
    let (transform, trunk) = GramWae::parts(config)?;
    let [e, d, x] = GramWae::specs_for(config, transform.as_ref(), trunk.as_ref());
    let (encoder, decoder, discriminator) = (count_params(&e), count_params(&d), count_params(&x));
    Ok(ParamCount {
        encoder,
        decoder,
        discriminator,
        total: encoder + decoder + discriminator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_spec() -> LayerSpec {
        LayerSpec::from_widths("toy", &[2, 3, 3])
    }

    fn random_gram_set(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> GramSet {
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let f: Array2<f64> = Array::from_shape_simple_fn((l.channels, 5), || StandardNormal.sample(rng));
                GramLayer {
                    id: l.id.clone(),
                    matrix: f.dot(&f.t()) / 5.0,
                }
            })
            .collect();
        GramSet::new(spec.backbone_id.clone(), layers)
    }

    #[test]
    fn zero_residual_unit_is_identity() {
        let unit = RecursiveUnit::new("ru", 4, 3, 2);
        let p = ParamSet::zeros(&unit.specs());
        let h = ndarray::array![1.0, -2.0, 3.0, 0.5];
        let v = ndarray::array![1.0, 1.0, 1.0];
        assert_eq!(ru_forward(&p, &unit, h.view(), v.view()).unwrap(), h);
        let zero = Array1::zeros(4);
        assert_eq!(ru_forward(&p, &unit, zero.view(), Array1::zeros(3).view()).unwrap(), zero);
    }

    #[test]
    fn zero_model_encodes_to_head_bias() {
        let mut m = GramWae::zeros(ModelConfig::toy(toy_spec())).unwrap();
        let bias = Array1::from_shape_fn(8, |i| i as f64 * 0.25);
        m.encoder.get_mut("head/b").assign(&bias.clone().into_dyn());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_gram_set(&toy_spec(), &mut rng);
        assert_eq!(m.encode(&x).unwrap(), bias);
    }

    #[test]
    fn decode_shapes_and_symmetry() {
        let m = GramWae::new(ModelConfig::toy(toy_spec()), 3).unwrap();
        let z = Array1::from_shape_fn(8, |i| (i as f64).sin());
        let g = m.decode(z.view()).unwrap();
        assert_eq!(g.ids(), toy_spec().ids());
        for (mat, c) in g.matrices().zip([2, 3, 3]) {
            assert_eq!(mat.dim(), (c, c));
            assert_eq!(mat, &mat.t());
        }
    }

    #[test]
    fn layer_mismatch_is_rejected() {
        let m = GramWae::new(ModelConfig::toy(toy_spec()), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_gram_set(&LayerSpec::from_widths("toy", &[2, 3]), &mut rng);
        assert!(m.encode(&x).is_err());
    }

    #[test]
    fn zero_discriminator_is_one_half() {
        let m = GramWae::zeros(ModelConfig::toy(toy_spec())).unwrap();
        assert_eq!(m.discriminate(Array1::zeros(8).view()).unwrap(), 0.5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = GramWae::new(ModelConfig::toy(toy_spec()), 9).unwrap();
        let c = m.to_container().unwrap();
        let back = GramWae::from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.encoder, m.encoder);
        assert_eq!(back.decoder, m.decoder);
        assert_eq!(back.discriminator, m.discriminator);
        assert_eq!(back.config(), m.config());
        assert!(c.contains("encoder/g2v/relu1_1/U"));
        assert!(c.contains("decoder/v2g/relu3_1/W_in"));
    }

    #[test]
    fn mlp_trunk_runs() {
        let cfg = ModelConfig {
            trunk: "mlp".into(),
            ..ModelConfig::toy(toy_spec())
        };
        let m = GramWae::new(cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_gram_set(&toy_spec(), &mut rng);
        let z = m.encode(&x).unwrap();
        assert_eq!(z.len(), 8);
        assert_eq!(m.decode(z.view()).unwrap().len(), 3);
    }

    #[test]
    fn unknown_trunk_is_rejected() {
        let cfg = ModelConfig {
            trunk: "lstm".into(),
            ..ModelConfig::toy(toy_spec())
        };
        assert_eq!(GramWae::new(cfg, 0).unwrap_err().kind(), "UnknownStrategy");
    }
}
