use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{ApproximatorArch, ApproximatorModel, OptimizerState, PreprocessorArch, PreprocessorModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "docclean-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelState {
    Preprocessor { arch: PreprocessorArch, params: Vec<f64> },
    Approximator { arch: ApproximatorArch, params: Vec<f64> },
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::parse("rng seed", e))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::parse("rng seed", "expected 32 bytes"))?;
        let word_pos: u128 = self.word_pos.parse().map_err(|e| Error::parse("rng word_pos", e))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// Self-describing JSON container for one model and its training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelState,
    pub optimizer: Option<OptimizerState>,
    pub epoch: u32,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn preprocessor(model: &PreprocessorModel, optimizer: Option<&OptimizerState>, epoch: u32, rng: Option<&ChaCha8Rng>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: ModelState::Preprocessor {
                arch: *model.arch(),
                params: model.params().to_vec(),
            },
            optimizer: optimizer.cloned(),
            epoch,
            rng: rng.map(RngState::capture),
        }
    }

    pub fn approximator(model: &ApproximatorModel, optimizer: Option<&OptimizerState>, epoch: u32, rng: Option<&ChaCha8Rng>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: ModelState::Approximator {
                arch: *model.arch(),
                params: model.params().to_vec(),
            },
            optimizer: optimizer.cloned(),
            epoch,
            rng: rng.map(RngState::capture),
        }
    }

    pub fn to_preprocessor(&self) -> Result<PreprocessorModel> {
        match &self.model {
            ModelState::Preprocessor { arch, params } => PreprocessorModel::from_parts(*arch, params.clone()),
            _ => Err(Error::InvalidState("checkpoint does not hold a preprocessor".into())),
        }
    }

    pub fn to_approximator(&self) -> Result<ApproximatorModel> {
        match &self.model {
            ModelState::Approximator { arch, params } => ApproximatorModel::from_parts(*arch, params.clone()),
            _ => Err(Error::InvalidState("checkpoint does not hold an approximator".into())),
        }
    }

    /// Parse and validate: known format, finite parameters, optimizer shapes
    /// matching the model.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::parse("checkpoint", e))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::parse("checkpoint", format!("unsupported format {:?}", ck.format)));
        }
        let n = match &ck.model {
            ModelState::Preprocessor { params, .. } | ModelState::Approximator { params, .. } => {
                if params.iter().any(|p| !p.is_finite()) {
                    return Err(Error::parse("checkpoint", "non-finite parameter"));
                }
                params.len()
            }
        };
        if let Some(opt) = &ck.optimizer {
            if opt.first_moment.len() != n || opt.second_moment.len() != n {
                return Err(Error::parse("checkpoint", "optimizer moments do not match parameter count"));
            }
        }
        match &ck.model {
            ModelState::Preprocessor { .. } => {
                ck.to_preprocessor().map_err(|e| Error::parse("checkpoint", e))?;
            }
            ModelState::Approximator { .. } => {
                ck.to_approximator().map_err(|e| Error::parse("checkpoint", e))?;
            }
        }
        if let Some(rng) = &ck.rng {
            rng.restore()?;
        }
        Ok(ck)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::parse("checkpoint", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_json(&bytes)
    }
}
