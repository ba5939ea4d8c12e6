//! File-level stages: extract, train, fit-gmm, sample, synthesize, evaluate.
//!
//! Every stage writes under a run directory and records its configuration
//! and artifacts in `run.json` there.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{
    compute_fid, extractor_registry, family_coverage, make_synthetic_corpus, Corpus, Coverage, Family, FidReport,
};
use crate::feature::{extract_gram_set, save_png, BackboneConfig, GramSet, Image};
use crate::gmm::{fit_gmm, prior_registry, select_n_components, CvReport, FitOptions, FitReport, GmmModel, PriorContext};
use crate::synthesis::{synthesize, SynthesisOptions, SynthesisResult, SynthesisTarget};
use crate::training::{train, TrainConfig, TrainOutputs, TrainState};
use crate::wae::{GramWae, ModelConfig};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config: Value,
    pub artifacts: Vec<PathBuf>,
    #[serde(default)]
    pub summary: Value,
}

/// Top-level record of what has been produced in a run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load_or_default(run_dir: impl AsRef<Path>) -> Result<Self> {
        let path = run_dir.as_ref().join(RUN_MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Replaces the record of `stage` and rewrites `run.json`.
    pub fn record(run_dir: impl AsRef<Path>, stage: &str, record: StageRecord) -> Result<()> {
        let dir = run_dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = Self::load_or_default(dir)?;
        m.stages.insert(stage.to_owned(), record);
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// One line of a Gram manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramRecord {
    pub gram_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
}

/// Gram sets with their manifest records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GramLibrary {
    pub records: Vec<GramRecord>,
    pub grams: Vec<GramSet>,
}

impl GramLibrary {
    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    /// Writes `<dir>/<i>.safetensors` for every set and `<dir>/manifest.jsonl`.
    pub fn write(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (rec, g) in self.records.iter().zip(&self.grams) {
            g.save(dir.join(&rec.gram_path))?;
        }
        let path = dir.join("manifest.jsonl");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for rec in &self.records {
            let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(path)
    }

    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let base = manifest.parent().unwrap_or(Path::new("."));
        let f = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut out = Self::default();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(manifest, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: GramRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", manifest.display(), n + 1)))?;
            out.grams.push(GramSet::load(base.join(&rec.gram_path))?);
            out.records.push(rec);
        }
        Ok(out)
    }

    pub fn from_grams(grams: Vec<GramSet>) -> Self {
        let records = (0..grams.len())
            .map(|i| GramRecord {
                gram_path: PathBuf::from(format!("{i:05}.safetensors")),
                image_path: None,
                family: None,
            })
            .collect();
        Self { records, grams }
    }

    pub fn families(&self) -> Option<Vec<String>> {
        self.records.iter().map(|r| r.family.clone()).collect()
    }
}

/// Gram sets of every corpus sample under the backbone's default layers.
pub fn extract_corpus(corpus: &Corpus, backbone: &BackboneConfig) -> Result<GramLibrary> {
    let bb = backbone.build()?;
    let mut lib = GramLibrary::default();
    for (i, item) in corpus.items.iter().enumerate() {
        let g = extract_gram_set(bb.as_ref(), &item.sample, bb.layer_spec())?;
        lib.grams.push(g);
        lib.records.push(GramRecord {
            gram_path: PathBuf::from(format!("{i:05}.safetensors")),
            image_path: Some(item.record.image_path.clone()),
            family: item.record.family.clone(),
        });
    }
    Ok(lib)
}

/// Builds a model config for `grams` from optional TOML overrides; the layer
/// spec and backbone always come from the data.
pub fn model_config_for(grams: &[GramSet], overrides: Option<&str>) -> Result<ModelConfig> {
    let first = grams.first().ok_or(Error::EmptyDataset)?;
    let backbone = first
        .backbone
        .clone()
        .ok_or_else(|| Error::InvalidConfig("gram files carry no backbone config".into()))?;
    let spec = backbone.build()?.layer_spec().clone();
    for g in grams {
        if g.ids() != spec.ids() || g.channel_counts() != spec.channel_counts() {
            return Err(Error::DimensionMismatch("gram sets do not share one layer spec".into()));
        }
    }
    let mut table: toml::Table = match overrides {
        Some(text) => toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?,
        None => toml::Table::new(),
    };
    table.insert(
        "layer_spec".into(),
        toml::Value::try_from(&spec).map_err(|e| Error::InvalidConfig(e.to_string()))?,
    );
    table.remove("backbone");
    let mut cfg: ModelConfig = table.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
    cfg.backbone = Some(backbone);
    cfg.validate()?;
    Ok(cfg)
}

/// Trains a fresh model, or resumes from `out/checkpoint.safetensors`.
pub fn train_model(grams: &[GramSet], model: ModelConfig, cfg: &TrainConfig, out: &Path, resume: bool) -> Result<TrainState> {
    let outputs = TrainOutputs { dir: out.to_path_buf() };
    let state = if resume && outputs.checkpoint().exists() {
        TrainState::load(outputs.checkpoint(), cfg)?
    } else {
        TrainState::new(GramWae::new(model, cfg.seed)?, cfg)
    };
    train(state, grams, cfg, Some(&outputs))
}

pub fn latent_codes(model: &GramWae, grams: &[GramSet]) -> Result<Array2<f64>> {
    if grams.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(model.encode_batch(grams)?.0)
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    pub report: FitReport,
    pub selection: Option<CvReport>,
}

/// Fits the latent mixture, choosing the component count by held-out
/// likelihood when more than one candidate is given.
pub fn fit_latent_gmm(codes: &Array2<f64>, candidates: &[usize], folds: usize, seed: u64) -> Result<GmmFit> {
    let (n_c, selection) = match candidates {
        [] => return Err(Error::InvalidConfig("no component counts given".into())),
        [one] => (*one, None),
        many => {
            let cv = select_n_components(codes.view(), many, folds, seed)?;
            (cv.best, Some(cv))
        }
    };
    let (model, report) = fit_gmm(codes.view(), &FitOptions::new(n_c, seed))?;
    Ok(GmmFit {
        model,
        report,
        selection,
    })
}

/// Draws `n` codes from the named prior and decodes them.
pub fn sample_grams(model: &GramWae, prior: &str, gmm: Option<&GmmModel>, n: usize, seed: u64) -> Result<(Array2<f64>, Vec<GramSet>)> {
    let ctx = PriorContext {
        gmm,
        dim: model.config().d_e,
    };
    let prior = prior_registry().get(prior)?(&ctx)?;
    if prior.dim() != model.config().d_e {
        return Err(Error::DimensionMismatch(format!(
            "prior has dimension {}, model latent width is {}",
            prior.dim(),
            model.config().d_e
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = prior.sample(n, &mut rng)?;
    let grams = codes.axis_iter(Axis(0)).map(|z| model.decode(z)).collect::<Result<Vec<_>>>()?;
    Ok((codes, grams))
}

/// Renders one Gram set with the backbone it names, writing `png` and the
/// loss trace next to it as CSV.
pub fn render(grams: &GramSet, size: usize, opts: &SynthesisOptions, png: &Path) -> Result<SynthesisResult> {
    let cfg = grams
        .backbone
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("gram set carries no backbone config".into()))?;
    let bb = cfg.build()?;
    let target = SynthesisTarget::square(grams.clone(), size);
    let result = synthesize(bb.as_ref(), &target, opts)?;
    save_png(result.image.view(), png)?;
    result.write_trace(png.with_extension("csv"))?;
    Ok(result)
}

pub fn fid_between(real: &[Image], generated: &[Image], extractor: &str, backbone: &BackboneConfig) -> Result<FidReport> {
    let ex = extractor_registry().get(extractor)?(backbone)?;
    compute_fid(real, generated, ex.as_ref())
}

/// Settings of the desk-scale end-to-end run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub corpus_size: usize,
    pub families: Vec<Family>,
    pub image_size: usize,
    pub backbone: BackboneConfig,
    /// TOML overrides for the model (layer spec comes from the backbone).
    pub model: String,
    pub train: TrainConfig,
    pub gmm_candidates: Vec<usize>,
    pub folds: usize,
    pub n_samples: usize,
    pub n_render: usize,
    pub render_size: usize,
    pub render_iters: usize,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        let train = TrainConfig {
            max_steps: 300,
            batch_size: 16,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        Self {
            corpus_size: 24,
            families: vec![Family::Stripes, Family::Dots],
            image_size: 32,
            backbone: BackboneConfig::random(&[8, 16, 32], 0),
            model: "d_e = 8\nd_r = 32\nd_v = 8\nd_dis = 32\n".into(),
            train,
            gmm_candidates: vec![2, 4],
            folds: 3,
            n_samples: 100,
            n_render: 4,
            render_size: 32,
            render_iters: 60,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub final_rec: f64,
    pub initial_rec: f64,
    pub n_components: usize,
    pub coverage_gmm: Coverage,
    pub coverage_standard_normal: Coverage,
    pub rendered: Vec<PathBuf>,
    pub render_losses: Vec<f64>,
}

/// make-corpus → extract → train → fit-gmm → sample → synthesize, all under
/// `run_dir`.
pub fn run_desk(cfg: &DeskConfig, run_dir: &Path) -> Result<DeskReport> {
    let mut corpus = make_synthetic_corpus(cfg.corpus_size, &cfg.families, cfg.image_size, cfg.seed)?;
    let corpus_manifest = corpus.write(run_dir.join("corpus"))?;
    RunManifest::record(
        run_dir,
        "make-corpus",
        StageRecord {
            config: serde_json::json!({"n": cfg.corpus_size, "families": cfg.families, "size": cfg.image_size, "seed": cfg.seed}),
            artifacts: vec![corpus_manifest],
            summary: to_value(&corpus.family_counts()),
        },
    )?;

    let mut lib = extract_corpus(&corpus, &cfg.backbone)?;
    let gram_manifest = lib.write(run_dir.join("grams"))?;
    RunManifest::record(
        run_dir,
        "extract",
        StageRecord {
            config: to_value(&cfg.backbone),
            artifacts: vec![gram_manifest],
            summary: serde_json::json!({"count": lib.len()}),
        },
    )?;

    let model_cfg = model_config_for(&lib.grams, Some(&cfg.model))?;
    let state = train_model(&lib.grams, model_cfg, &cfg.train, &run_dir.join("model"), false)?;
    let initial_rec = state.trace.first().map_or(f64::NAN, |s| s.rec);
    let final_rec = state.trace.last().map_or(f64::NAN, |s| s.rec);
    RunManifest::record(
        run_dir,
        "train",
        StageRecord {
            config: to_value(&cfg.train),
            artifacts: vec![run_dir.join("model/checkpoint.safetensors"), run_dir.join("model/losses.csv")],
            summary: serde_json::json!({"steps": state.step, "initial_rec": initial_rec, "final_rec": final_rec}),
        },
    )?;
    let model = state.model;

    let codes = latent_codes(&model, &lib.grams)?;
    let fit = fit_latent_gmm(&codes, &cfg.gmm_candidates, cfg.folds, cfg.seed)?;
    let gmm_path = run_dir.join("gmm.safetensors");
    fit.model.save(&gmm_path)?;
    RunManifest::record(
        run_dir,
        "fit-gmm",
        StageRecord {
            config: serde_json::json!({"candidates": cfg.gmm_candidates, "folds": cfg.folds, "seed": cfg.seed}),
            artifacts: vec![gmm_path],
            summary: serde_json::json!({
                "n_components": fit.model.n_components(),
                "iterations": fit.report.iterations,
                "cv_scores": fit.selection.as_ref().map(|s| s.scores.clone()),
            }),
        },
    )?;

    let labels = lib
        .families()
        .ok_or_else(|| Error::InvalidConfig("desk corpus must be labeled".into()))?;
    let (_, sampled) = sample_grams(&model, "gmm", Some(&fit.model), cfg.n_samples, cfg.seed)?;
    let (_, ablation) = sample_grams(&model, "standard-normal", None, cfg.n_samples, cfg.seed)?;
    let coverage_gmm = family_coverage(&sampled, &lib.grams, &labels)?;
    let coverage_standard_normal = family_coverage(&ablation, &lib.grams, &labels)?;
    let mut samples = GramLibrary::from_grams(sampled.clone());
    let sample_manifest = samples.write(run_dir.join("samples"))?;
    RunManifest::record(
        run_dir,
        "sample",
        StageRecord {
            config: serde_json::json!({"n": cfg.n_samples, "seed": cfg.seed, "prior": "gmm"}),
            artifacts: vec![sample_manifest],
            summary: serde_json::json!({"coverage_gmm": coverage_gmm, "coverage_standard_normal": coverage_standard_normal}),
        },
    )?;

    let mut rendered = Vec::new();
    let mut render_losses = Vec::new();
    for (i, g) in sampled.iter().take(cfg.n_render).enumerate() {
        let png = run_dir.join(format!("synth/{i:03}.png"));
        let opts = SynthesisOptions {
            max_iters: cfg.render_iters,
            seed: cfg.seed.wrapping_add(i as u64),
            ..Default::default()
        };
        let r = render(g, cfg.render_size, &opts, &png)?;
        render_losses.push(r.loss);
        rendered.push(png);
    }
    RunManifest::record(
        run_dir,
        "synthesize",
        StageRecord {
            config: serde_json::json!({"size": cfg.render_size, "iters": cfg.render_iters, "seed": cfg.seed}),
            artifacts: rendered.clone(),
            summary: serde_json::json!({"losses": render_losses}),
        },
    )?;

    Ok(DeskReport {
        final_rec,
        initial_rec,
        n_components: fit.model.n_components(),
        coverage_gmm,
        coverage_standard_normal,
        rendered,
        render_losses,
    })
}
