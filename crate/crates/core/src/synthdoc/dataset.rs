use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Component, Path};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{degrade, render_clean, DegradationConfig, GlyphAtlas};
use crate::error::{Error, Result};
use crate::imaging::{Gray8, Image};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::parse("split", format!("unknown split {other:?}"))),
        }
    }
}

/// One word image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TextStrip {
    pub sample_id: String,
    pub image: Image,
    pub text: String,
    pub document_id: String,
    pub split: Split,
}

/// A group of strips that is pruned or kept as a unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthDocument {
    pub document_id: String,
    pub strip_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }
}

/// Ranges from which per-document and per-strip degradations are drawn.
///
/// Each document gets a severity in `[severity_min, 1]` (zero for a
/// `clean_fraction` of documents); a strip's parameters are the maxima below scaled by its
/// document's severity and a per-strip factor in `[0.75, 1.25]`. Ink
/// fading is drawn per document in `[0, ink_max]` regardless of severity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRanges {
    pub sigma_max: f64,
    pub shade_max: f64,
    pub salt_pepper_max: f64,
    pub blur_probability: f64,
    pub occlusion_max: f64,
    pub clean_fraction: f64,
    #[serde(default)]
    pub severity_min: f64,
    #[serde(default = "default_ink_max")]
    pub ink_max: f64,
}

fn default_ink_max() -> f64 {
    DegradationRanges::default().ink_max
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("sigma_max", self.sigma_max, f64::INFINITY),
            ("shade_max", self.shade_max, 1.0),
            ("salt_pepper_max", self.salt_pepper_max, 1.0),
            ("blur_probability", self.blur_probability, 1.0),
            ("occlusion_max", self.occlusion_max, 1.0),
            ("clean_fraction", self.clean_fraction, 1.0),
            ("severity_min", self.severity_min, 1.0),
            ("ink_max", self.ink_max, 1.0),
        ];
        for (name, v, hi) in unit {
            if !(0.0..=hi).contains(&v) {
                return Err(Error::InvalidArgument(format!("degradation range {name} = {v} is out of bounds")));
            }
        }
        Ok(())
    }
}

impl Default for DegradationRanges {
    fn default() -> Self {
        DegradationRanges {
            sigma_max: 0.35,
            shade_max: 0.6,
            salt_pepper_max: 0.02,
            blur_probability: 0.3,
            occlusion_max: 0.0,
            clean_fraction: 0.15,
            severity_min: 0.0,
            ink_max: 0.35,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub words: Vec<String>,
    pub counts: SplitCounts,
    pub strips_per_document: usize,
    pub margin: usize,
    pub ranges: DegradationRanges,
    pub seed: u64,
}

/// A manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub path: String,
    pub text: String,
    pub document_id: String,
    pub split: Split,
}

/// Strips plus their document grouping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub strips: Vec<TextStrip>,
    pub documents: Vec<SynthDocument>,
}

impl Dataset {
    /// Build from strips, grouping documents in order of first appearance.
    pub fn from_strips(strips: Vec<TextStrip>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for s in &strips {
            if !seen.insert(s.sample_id.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate sample_id {}", s.sample_id)));
            }
            let entry = groups.entry(s.document_id.clone()).or_insert_with(|| {
                order.push(s.document_id.clone());
                Vec::new()
            });
            entry.push(s.sample_id.clone());
        }
        let documents = order
            .into_iter()
            .map(|id| SynthDocument {
                strip_ids: groups.remove(&id).unwrap_or_default(),
                document_id: id,
            })
            .collect();
        Ok(Dataset { strips, documents })
    }

    pub fn split(&self, split: Split) -> Vec<&TextStrip> {
        self.strips.iter().filter(|s| s.split == split).collect()
    }

    pub fn documents_in(&self, split: Split) -> Vec<&SynthDocument> {
        let ids: HashSet<&str> = self
            .strips
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.document_id.as_str())
            .collect();
        self.documents
            .iter()
            .filter(|d| ids.contains(d.document_id.as_str()))
            .collect()
    }

    /// Generate in memory without touching the filesystem. Images are
    /// quantized to 8 bits so they equal what a manifest load would return.
    pub fn synthesize(cfg: &GeneratorConfig) -> Result<Self> {
        if cfg.strips_per_document == 0 {
            return Err(Error::InvalidArgument("strips_per_document must be at least 1".into()));
        }
        if cfg.words.is_empty() {
            return Err(Error::InvalidArgument("word list is empty".into()));
        }
        for split in Split::ALL {
            if cfg.counts.get(split) == 0 {
                return Err(Error::InvalidArgument(format!("{split} count must be at least 1")));
            }
        }
        cfg.ranges.validate()?;
        let atlas = GlyphAtlas::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = &cfg.ranges;
        let mut strips = Vec::new();
        for split in Split::ALL {
            let n = cfg.counts.get(split);
            let mut severity = 0.0;
            let mut ink = 0.0;
            for i in 0..n {
                let doc_index = i / cfg.strips_per_document;
                if i % cfg.strips_per_document == 0 {
                    severity = if rng.gen::<f64>() < r.clean_fraction { 0.0 } else { rng.gen_range(r.severity_min..=1.0) };
                    ink = r.ink_max * rng.gen::<f64>();
                }
                let text = cfg.words.choose(&mut rng).expect("non-empty").clone();
                let mut jitter = || rng.gen_range(0.75..1.25);
                let degradation = DegradationConfig {
                    ink_level: ink,
                    gaussian_sigma: r.sigma_max * severity * jitter(),
                    salt_pepper_rate: (r.salt_pepper_max * severity * jitter()).clamp(0.0, 1.0),
                    background_shade: (r.shade_max * severity * jitter()).clamp(0.0, 1.0),
                    blur_radius: 0,
                    occlusion_rate: (r.occlusion_max * severity * jitter()).clamp(0.0, 1.0),
                    seed: 0,
                };
                let degradation = DegradationConfig {
                    blur_radius: usize::from(rng.gen::<f64>() < r.blur_probability * severity),
                    seed: rng.gen(),
                    ..degradation
                };
                let clean = render_clean(&text, &atlas, cfg.margin)?;
                let image = degrade(&clean, &degradation).to_gray8().to_image();
                strips.push(TextStrip {
                    sample_id: format!("{}-{:06}", split.as_str(), i),
                    image,
                    text,
                    document_id: format!("{}-doc-{:05}", split.as_str(), doc_index),
                    split,
                });
            }
        }
        Dataset::from_strips(strips)
    }
}

/// Generate a dataset and write `images/*.png` plus the manifest under `out`.
pub fn generate_dataset(cfg: &GeneratorConfig, out: &Path) -> Result<Dataset> {
    let dataset = Dataset::synthesize(cfg)?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(dataset.strips.len());
    for strip in &dataset.strips {
        let rel = format!("images/{}.png", strip.sample_id);
        strip.image.to_gray8().write_png(&out.join(&rel))?;
        records.push(ManifestRecord {
            sample_id: strip.sample_id.clone(),
            path: rel,
            text: strip.text.clone(),
            document_id: strip.document_id.clone(),
            split: strip.split,
        });
    }
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    Ok(dataset)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::parse("manifest", e))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parse manifest JSON lines. Blank lines are skipped; sample ids must be
/// unique and image paths must be relative without parent components.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(format!("manifest line {}", lineno + 1), e))?;
        let p = Path::new(&rec.path);
        if rec.path.is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(Error::parse(
                format!("manifest line {}", lineno + 1),
                format!("image path {:?} must be relative and stay inside the dataset", rec.path),
            ));
        }
        if !seen.insert(rec.sample_id.clone()) {
            return Err(Error::parse(
                format!("manifest line {}", lineno + 1),
                format!("duplicate sample_id {}", rec.sample_id),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Load a dataset from a manifest file; image paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    let records = parse_manifest(&text)?;
    let strips = records
        .into_iter()
        .map(|r| {
            let image = Gray8::read_png(&root.join(&r.path))?.to_image();
            Ok(TextStrip {
                sample_id: r.sample_id,
                image,
                text: r.text,
                document_id: r.document_id,
                split: r.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_strips(strips)
}
