use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{load_image, load_mask, save_mask, save_png, TextureSample};

/// Smallest fraction of mask pixels a sample needs to be kept.
pub const DEFAULT_MIN_MASK_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Stripes,
    Dots,
    Checker,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Stripes, Family::Dots, Family::Checker];

    pub fn name(self) -> &'static str {
        match self {
            Family::Stripes => "stripes",
            Family::Dots => "dots",
            Family::Checker => "checker",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "family",
                name: s.to_owned(),
                available: Self::ALL.map(Family::name).join(", "),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ingested,
    Procedural,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub record: CorpusRecord,
    pub sample: TextureSample,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &TextureSample> {
        self.items.iter().map(|i| &i.sample)
    }

    pub fn families(&self) -> Vec<Option<String>> {
        self.items.iter().map(|i| i.record.family.clone()).collect()
    }

    /// Samples per family label; unlabeled samples are not counted.
    pub fn family_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for f in self.items.iter().filter_map(|i| i.record.family.clone()) {
            *out.entry(f).or_insert(0) += 1;
        }
        out
    }

    /// Writes procedural images and masks under `dir`, then
    /// `dir/manifest.jsonl`. Relative record paths resolve against `dir`;
    /// ingested records keep the paths they were read from.
    pub fn write(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for item in &mut self.items {
            if item.record.provenance == Provenance::Procedural {
                save_png(item.sample.image().view(), dir.join(&item.record.image_path))?;
                save_mask(item.sample.mask(), dir.join(&item.record.mask_path))?;
            }
        }
        let path = dir.join("manifest.jsonl");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for item in &self.items {
            let line = serde_json::to_string(&item.record).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(path)
    }

    /// Reads a manifest and loads every referenced pair.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let base = manifest.parent().unwrap_or(Path::new("."));
        let f = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut items = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(manifest, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CorpusRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", manifest.display(), n + 1)))?;
            let image = load_image(base.join(&record.image_path))?;
            let mask = load_mask(base.join(&record.mask_path))?;
            let sample = TextureSample::new(image, mask)?;
            items.push(CorpusItem { record, sample });
        }
        Ok(Self { items })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    /// Keep only samples whose file stem or `<stem>.txt` attribute sidecar
    /// contains one of these (case-insensitive). Empty keeps everything.
    pub keywords: Vec<String>,
    pub min_mask_fraction: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            keywords: Vec::new(),
            min_mask_fraction: DEFAULT_MIN_MASK_FRACTION,
        }
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn matches_keywords(stem: &str, sidecar: &Path, keywords: &[String]) -> Result<bool> {
    if keywords.is_empty() {
        return Ok(true);
    }
    let mut text = stem.to_lowercase();
    if sidecar.exists() {
        text.push('\n');
        text.push_str(&fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?.to_lowercase());
    }
    Ok(keywords.iter().any(|k| text.contains(&k.to_lowercase())))
}

/// Collects `<stem>.{png,jpg}` + `<stem>_mask.png` pairs from `dir` in file
/// name order.
///
/// Pairs without a mask, with mismatched sizes or with too small a mask area
/// are skipped and logged. Unreadable files are errors.
pub fn ingest(dir: impl AsRef<Path>, opts: &IngestOptions) -> Result<Corpus> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    paths.sort();

    let mut items = Vec::new();
    for path in paths.iter().filter(|p| is_image(p)) {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if stem.ends_with("_mask") {
            continue;
        }
        let mask_path = dir.join(format!("{stem}_mask.png"));
        if !mask_path.exists() {
            log::warn!("{}: no mask file, skipped", path.display());
            continue;
        }
        if !matches_keywords(stem, &dir.join(format!("{stem}.txt")), &opts.keywords)? {
            continue;
        }
        let image = load_image(path)?;
        let mask = load_mask(&mask_path)?;
        let (_, h, w) = image.dim();
        if mask.dim() != (h, w) {
            log::error!(
                "{}: image is {h}x{w} but mask is {}x{}, skipped",
                path.display(),
                mask.nrows(),
                mask.ncols()
            );
            continue;
        }
        let fraction = mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64;
        if fraction < opts.min_mask_fraction {
            log::info!("{}: mask covers {:.4} of the image, skipped", path.display(), fraction);
            continue;
        }
        let sample = TextureSample::new(image, mask)?;
        items.push(CorpusItem {
            record: CorpusRecord {
                image_path: path.clone(),
                mask_path,
                family: None,
                provenance: Provenance::Ingested,
            },
            sample,
        });
    }
    if items.is_empty() {
        log::warn!("{}: no usable image/mask pairs", dir.display());
    }
    Ok(Corpus { items })
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    (0.5 + x / edge).clamp(0.0, 1.0)
}

/// One procedural texture of the given family with random orientation,
/// period and colors.
pub(crate) fn render_family(family: Family, size: usize, rng: &mut impl Rng) -> Array3<f64> {
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let period = rng.random_range(6.0..20.0);
    let c0: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.0..0.45));
    let c1: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.55..1.0));
    let (s, c) = theta.sin_cos();
    let tau = std::f64::consts::TAU;
    let mut img = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let u = (xf * c + yf * s) / period;
            let v = (-xf * s + yf * c) / period;
            let t = match family {
                Family::Stripes => 0.5 + 0.5 * (tau * u).sin(),
                Family::Checker => smoothstep(0.15, (tau * u).sin() * (tau * v).sin()),
                Family::Dots => {
                    let du = u - u.round();
                    let dv = v - v.round();
                    smoothstep(0.08, 0.3 - (du * du + dv * dv).sqrt())
                }
            };
            let px = lerp(c0, c1, t);
            for ch in 0..3 {
                img[[ch, y, x]] = px[ch];
            }
        }
    }
    img
}

/// `n` procedural textures with full masks. Families are assigned
/// round-robin in the order given; sample `i` draws from its own stream of
/// the seeded generator.
pub fn make_synthetic_corpus(n: usize, families: &[Family], size: usize, seed: u64) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::InvalidConfig("corpus size must be at least 1".into()));
    }
    if families.is_empty() {
        return Err(Error::InvalidConfig("at least one family is required".into()));
    }
    if size == 0 {
        return Err(Error::InvalidConfig("image size must be positive".into()));
    }
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let family = families[i % families.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let image = render_family(family, size, &mut rng);
        let sample = TextureSample::new(image, Array2::from_elem((size, size), true))?;
        items.push(CorpusItem {
            record: CorpusRecord {
                image_path: PathBuf::from(format!("images/{i:05}_{}.png", family.name())),
                mask_path: PathBuf::from(format!("images/{i:05}_{}_mask.png", family.name())),
                family: Some(family.name().to_owned()),
                provenance: Provenance::Procedural,
            },
            sample,
        });
    }
    Ok(Corpus { items })
}
