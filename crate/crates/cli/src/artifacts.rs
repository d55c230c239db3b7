use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use docclean::pruning::{prune, DocumentRank};
use docclean::synthdoc::{parse_manifest, MANIFEST_FILE};
use docclean::trainer::{Pretrained, TrainConfig};
use docclean::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PRETRAIN_FORMAT: &str = "docclean-pretrain/1";
pub const EXPERIMENT_MANIFEST: &str = "experiment.json";

/// sha256 over the manifest followed by every image it references, in order.
pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = std::fs::read(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(manifest_path.clone()),
        _ => Error::Io {
            path: manifest_path.clone(),
            source: e,
        },
    })?;
    let records = parse_manifest(&String::from_utf8_lossy(&manifest))?;
    let mut h = Sha256::new();
    h.update(&manifest);
    for r in records {
        let p = dir.join(&r.path);
        let bytes = std::fs::read(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
        h.update((bytes.len() as u64).to_be_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn code_fingerprint() -> String {
    match option_env!("DOCCLEAN_GIT_REV") {
        Some(rev) => format!("docclean-{}+{rev}", env!("CARGO_PKG_VERSION")),
        None => format!("docclean-{}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub experiment_id: String,
    pub command: String,
    pub config_snapshot: String,
    pub dataset_fingerprint: String,
    pub code_fingerprint: String,
    pub outputs: Vec<PathBuf>,
}

impl ExperimentManifest {
    pub fn new(command: &str, config_snapshot: String, dataset_fingerprint: String, outputs: Vec<PathBuf>) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(config_snapshot.as_bytes());
        h.update([0]);
        h.update(dataset_fingerprint.as_bytes());
        let experiment_id = hex::encode(&h.finalize()[..8]);
        ExperimentManifest {
            experiment_id,
            command: command.to_string(),
            config_snapshot,
            dataset_fingerprint,
            code_fingerprint: code_fingerprint(),
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(EXPERIMENT_MANIFEST), self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        detail: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Settings a pretraining artifact depends on; training refuses an
/// artifact whose settings differ from the current configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub seed: u64,
    pub pretrain_epochs: u32,
    pub lr_pretrain: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub prune_fraction: f64,
    pub model: docclean::trainer::ModelSection,
    pub backend: String,
}

impl PretrainSettings {
    pub fn of(cfg: &TrainConfig) -> Self {
        PretrainSettings {
            seed: cfg.train.seed,
            pretrain_epochs: cfg.train.pretrain_epochs,
            lr_pretrain: cfg.train.lr_pretrain,
            weight_decay: cfg.train.weight_decay,
            batch_size: cfg.train.batch_size,
            prune_fraction: cfg.data.prune_fraction,
            model: cfg.model.clone(),
            backend: cfg.backend.spec.to_string(),
        }
    }

    /// Keys whose values differ from `other`.
    pub fn differing_keys(&self, other: &PretrainSettings) -> Vec<&'static str> {
        let mut keys = Vec::new();
        let mut diff = |same: bool, key: &'static str| {
            if !same {
                keys.push(key);
            }
        };
        diff(self.seed == other.seed, "train.seed");
        diff(self.pretrain_epochs == other.pretrain_epochs, "train.pretrain_epochs");
        diff(self.lr_pretrain == other.lr_pretrain, "train.lr_pretrain");
        diff(self.weight_decay == other.weight_decay, "train.weight_decay");
        diff(self.batch_size == other.batch_size, "train.batch_size");
        diff(self.prune_fraction == other.prune_fraction, "data.prune_fraction");
        diff(self.model == other.model, "model");
        diff(self.backend == other.backend, "backend.spec");
        keys
    }
}

/// Everything the training stage needs besides the approximator checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainArtifact {
    pub format: String,
    pub dataset_fingerprint: String,
    pub settings: PretrainSettings,
    pub prepass: BTreeMap<String, String>,
    pub ranking: Vec<DocumentRank>,
    pub pretrain_losses: Vec<f64>,
    pub prepass_queries: usize,
}

impl PretrainArtifact {
    pub fn from_stage(p: &Pretrained, cfg: &TrainConfig, dataset_fingerprint: String) -> Self {
        PretrainArtifact {
            format: PRETRAIN_FORMAT.to_string(),
            dataset_fingerprint,
            settings: PretrainSettings::of(cfg),
            prepass: p.prepass.clone(),
            ranking: p.ranking.clone(),
            pretrain_losses: p.pretrain_losses.clone(),
            prepass_queries: p.prepass_queries,
        }
    }

    pub fn into_stage(self, approximator: docclean::neural::ApproximatorModel) -> Result<Pretrained> {
        if self.format != PRETRAIN_FORMAT {
            return Err(Error::Parse {
                context: "pretrain artifact".into(),
                detail: format!("unsupported format {:?}", self.format),
            });
        }
        let pruning = prune(&self.ranking, self.settings.prune_fraction)?;
        Ok(Pretrained {
            approximator,
            prepass: self.prepass,
            ranking: self.ranking,
            pruning,
            pretrain_losses: self.pretrain_losses,
            prepass_queries: self.prepass_queries,
        })
    }
}

/// Paths under an experiment directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }
    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    pub fn pretrain_artifact(&self) -> PathBuf {
        self.pretrain_dir().join("prepass.json")
    }
    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.pretrain_dir().join("approximator.json")
    }
    pub fn pretrain_ledger(&self) -> PathBuf {
        self.pretrain_dir().join("ledger.csv")
    }
    pub fn prune_report(&self) -> PathBuf {
        self.root.join("prune_report.csv")
    }
    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }
}
