use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use texgram::eval::{ingest, make_synthetic_corpus, pca_embed, Corpus, Family, IngestOptions};
use texgram::feature::{load_image, BackboneConfig, GramSet, Image};
use texgram::gmm::{GmmModel, DEFAULT_CANDIDATES};
use texgram::pipeline::{
    extract_corpus, fid_between, fit_latent_gmm, latent_codes, model_config_for, render, run_desk, sample_grams,
    train_model, DeskConfig, GramLibrary, RunManifest, StageRecord,
};
use texgram::synthesis::{InitImage, SynthesisOptions};
use texgram::training::TrainConfig;
use texgram::wae::GramWae;
use texgram::{Error, Result};

#[derive(Parser)]
#[command(name = "texgram", version, about = "Generative Gram-matrix texture models")]
struct Cli {
    /// Record the stage in `<DIR>/run.json`.
    #[arg(long, global = true, value_name = "DIR")]
    run: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural texture corpus.
    MakeCorpus(MakeCorpusArgs),
    /// Collect image/mask pairs from a directory into a corpus manifest.
    Ingest(IngestArgs),
    /// Extract Gram sets for every sample of a corpus.
    Extract(ExtractArgs),
    /// Train the auto-encoder on extracted Gram sets.
    Train(TrainArgs),
    /// Fit the latent Gaussian mixture to the training codes.
    FitGmm(FitGmmArgs),
    /// Sample latent codes and decode them to Gram files.
    Sample(SampleArgs),
    /// Render a texture image from a Gram file.
    Synthesize(SynthesizeArgs),
    /// FID between two image sets.
    Evaluate(EvaluateArgs),
    /// 2-D PCA embedding of training codes, prior samples and mixture ellipses.
    Embed(EmbedArgs),
    /// Run every stage at desk scale under one directory.
    Desk(DeskArgs),
}

#[derive(Args)]
struct MakeCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_value = "stripes,dots,checker")]
    families: Vec<String>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    keywords: Vec<String>,
    #[arg(long, default_value_t = texgram::eval::DEFAULT_MIN_MASK_FRACTION)]
    min_mask_fraction: f64,
}

#[derive(Args)]
struct BackboneArgs {
    /// TOML backbone config; the desk backbone when absent.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

impl BackboneArgs {
    fn load(&self) -> Result<BackboneConfig> {
        match &self.backbone {
            Some(p) => toml::from_str(&read(p)?).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display()))),
            None => Ok(BackboneConfig::desk()),
        }
    }
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    backbone: BackboneArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Gram manifest written by `extract`.
    #[arg(long)]
    grams: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training config TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model config TOML (the layer spec comes from the data).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct FitGmmArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    grams: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Candidate component counts; one value skips cross-validation.
    #[arg(long, value_delimiter = ',')]
    components: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    gmm: Option<PathBuf>,
    #[arg(long, default_value = "gmm")]
    prior: String,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    gram_file: PathBuf,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "lbfgs")]
    optimizer: String,
    /// Start from this image instead of white noise.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Corpus manifest or directory of PNGs.
    #[arg(long)]
    real: PathBuf,
    /// Corpus manifest or directory of PNGs.
    #[arg(long)]
    generated: PathBuf,
    #[arg(long, default_value = "pooled")]
    extractor: String,
    #[command(flatten)]
    backbone: BackboneArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    grams: PathBuf,
    #[arg(long)]
    gmm: Option<PathBuf>,
    #[arg(long, default_value = "gmm")]
    prior: String,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DeskArgs {
    #[arg(long)]
    out: PathBuf,
    /// Desk run config as JSON; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_images(path: &Path) -> Result<Vec<Image>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png") && !p.to_string_lossy().ends_with("_mask.png"))
            .collect();
        files.sort();
        files.iter().map(load_image).collect()
    } else {
        Ok(Corpus::load(path)?.samples().map(|s| s.image().clone()).collect())
    }
}

fn load_gmm(path: Option<&PathBuf>, prior: &str) -> Result<Option<GmmModel>> {
    match path {
        Some(p) => Ok(Some(GmmModel::load(p)?)),
        None if prior == "gmm" => Err(Error::InvalidConfig("--gmm is required for the gmm prior".into())),
        None => Ok(None),
    }
}

fn stage(config: Value, artifacts: Vec<PathBuf>, summary: Value) -> StageRecord {
    StageRecord {
        config,
        artifacts,
        summary,
    }
}

fn run(command: Command) -> Result<(&'static str, StageRecord)> {
    match command {
        Command::MakeCorpus(a) => {
            let families = a.families.iter().map(|f| Family::parse(f)).collect::<Result<Vec<_>>>()?;
            let mut corpus = make_synthetic_corpus(a.n, &families, a.size, a.seed)?;
            let manifest = corpus.write(&a.out)?;
            Ok((
                "make-corpus",
                stage(
                    json!({"n": a.n, "families": a.families, "size": a.size, "seed": a.seed}),
                    vec![manifest],
                    json!({"count": corpus.len(), "families": corpus.family_counts()}),
                ),
            ))
        }
        Command::Ingest(a) => {
            let dir = fs::canonicalize(&a.dir).map_err(|e| Error::Io { path: a.dir.clone(), source: e })?;
            let opts = IngestOptions {
                keywords: a.keywords.clone(),
                min_mask_fraction: a.min_mask_fraction,
            };
            let mut corpus = ingest(&dir, &opts)?;
            let manifest = corpus.write(&a.out)?;
            Ok((
                "ingest",
                stage(
                    json!({"dir": dir, "keywords": a.keywords, "min_mask_fraction": a.min_mask_fraction}),
                    vec![manifest],
                    json!({"count": corpus.len()}),
                ),
            ))
        }
        Command::Extract(a) => {
            let backbone = a.backbone.load()?;
            let corpus = Corpus::load(&a.corpus)?;
            let mut lib = extract_corpus(&corpus, &backbone)?;
            let manifest = lib.write(&a.out)?;
            Ok((
                "extract",
                stage(serde_json::to_value(&backbone).unwrap_or(Value::Null), vec![manifest], json!({"count": lib.len()})),
            ))
        }
        Command::Train(a) => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = a.steps {
                cfg.max_steps = s;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let lib = GramLibrary::load(&a.grams)?;
            let overrides = a.model.as_deref().map(read).transpose()?;
            let model = model_config_for(&lib.grams, overrides.as_deref())?;
            let state = train_model(&lib.grams, model, &cfg, &a.out, a.resume)?;
            let last = state.trace.last().map(|s| s.rec);
            Ok((
                "train",
                stage(
                    serde_json::to_value(&cfg).unwrap_or(Value::Null),
                    vec![a.out.join("checkpoint.safetensors"), a.out.join("losses.csv")],
                    json!({"steps": state.step, "final_rec": last, "params": state.model.param_count().total}),
                ),
            ))
        }
        Command::FitGmm(a) => {
            let model = GramWae::load(&a.model)?;
            let lib = GramLibrary::load(&a.grams)?;
            let codes = latent_codes(&model, &lib.grams)?;
            let candidates = if a.components.is_empty() { DEFAULT_CANDIDATES.to_vec() } else { a.components.clone() };
            let fit = fit_latent_gmm(&codes, &candidates, a.folds, a.seed)?;
            fit.model.save(&a.out)?;
            Ok((
                "fit-gmm",
                stage(
                    json!({"components": candidates, "folds": a.folds, "seed": a.seed}),
                    vec![a.out.clone()],
                    json!({
                        "n_components": fit.model.n_components(),
                        "iterations": fit.report.iterations,
                        "converged": fit.report.converged,
                        "cv_scores": fit.selection.map(|s| s.scores),
                    }),
                ),
            ))
        }
        Command::Sample(a) => {
            let model = GramWae::load(&a.model)?;
            let gmm = load_gmm(a.gmm.as_ref(), &a.prior)?;
            let (_, grams) = sample_grams(&model, &a.prior, gmm.as_ref(), a.n, a.seed)?;
            let mut lib = GramLibrary::from_grams(grams);
            let manifest = lib.write(&a.out)?;
            Ok((
                "sample",
                stage(json!({"prior": a.prior, "n": a.n, "seed": a.seed}), vec![manifest], json!({"count": a.n})),
            ))
        }
        Command::Synthesize(a) => {
            let grams = GramSet::load(&a.gram_file)?;
            let init = match &a.init {
                Some(p) => InitImage::Image(load_image(p)?),
                None => InitImage::WhiteNoise,
            };
            let opts = SynthesisOptions {
                init,
                max_iters: a.iters,
                seed: a.seed,
                optimizer: a.optimizer.clone(),
            };
            let r = render(&grams, a.size, &opts, &a.out)?;
            Ok((
                "synthesize",
                stage(
                    json!({"gram_file": a.gram_file, "size": a.size, "iters": a.iters, "seed": a.seed, "optimizer": a.optimizer}),
                    vec![a.out.clone(), a.out.with_extension("csv")],
                    json!({"loss": r.loss, "initial_loss": r.initial_loss, "iterations": r.iterations, "relative_residuals": r.relative_residuals}),
                ),
            ))
        }
        Command::Evaluate(a) => {
            let backbone = a.backbone.load()?;
            let real = load_images(&a.real)?;
            let generated = load_images(&a.generated)?;
            let report = fid_between(&real, &generated, &a.extractor, &backbone)?;
            let summary = serde_json::to_value(&report).unwrap_or(Value::Null);
            let mut artifacts = Vec::new();
            if let Some(out) = &a.out {
                let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
                fs::write(out, text).map_err(|e| Error::Io { path: out.clone(), source: e })?;
                artifacts.push(out.clone());
            }
            Ok((
                "evaluate",
                stage(json!({"real": a.real, "generated": a.generated, "extractor": a.extractor}), artifacts, summary),
            ))
        }
        Command::Embed(a) => {
            let model = GramWae::load(&a.model)?;
            let lib = GramLibrary::load(&a.grams)?;
            let gmm = load_gmm(a.gmm.as_ref(), &a.prior)?;
            let codes = latent_codes(&model, &lib.grams)?;
            let (samples, _) = sample_grams(&model, &a.prior, gmm.as_ref(), a.n, a.seed)?;
            let e = pca_embed(codes.view(), samples.view(), gmm.as_ref())?;
            e.write(&a.out)?;
            Ok((
                "embed",
                stage(
                    json!({"prior": a.prior, "n": a.n, "seed": a.seed}),
                    vec![a.out.clone(), a.out.with_extension("ellipses.json")],
                    json!({"variances": e.frame.variances}),
                ),
            ))
        }
        Command::Desk(a) => {
            let mut cfg: DeskConfig = match &a.config {
                Some(p) => serde_json::from_str(&read(p)?).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?,
                None => DeskConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
                cfg.train.seed = s;
            }
            let report = run_desk(&cfg, &a.out)?;
            Ok((
                "desk",
                stage(
                    serde_json::to_value(&cfg).unwrap_or(Value::Null),
                    report.rendered.clone(),
                    serde_json::to_value(&report).unwrap_or(Value::Null),
                ),
            ))
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({"status": "error", "kind": kind, "message": message}).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("Usage", first));
            return ExitCode::from(2);
        }
    };
    let run_dir = cli.run.clone();
    let outcome = run(cli.command).and_then(|(name, record)| {
        let line = json!({"status": "ok", "command": name, "summary": record.summary}).to_string();
        if let Some(dir) = &run_dir {
            RunManifest::record(dir, name, record)?;
        }
        Ok(line)
    });
    match outcome {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
