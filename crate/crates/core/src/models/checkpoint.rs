use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ClassifierSpec;
use super::params::NamedArray;
use super::Classifier;
use crate::error::{Error, Result};
use crate::optim::OptimState;
use crate::util::{read_file, sha256_hex, write_file};

pub const CHECKPOINT_FORMAT: u32 = 1;
const MAGIC: &[u8; 8] = b"AIKDCKPT";

/// Accuracy of the checkpointed model on a held-out split at save time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutRecord {
    pub split: String,
    pub accuracy: f64,
    pub n_samples: usize,
}

/// Everything beyond the model parameters needed to continue a run from an
/// epoch boundary. Random streams are derived from `(seed, epoch, step)` and
/// need no state of their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub global_step: u64,
    pub student_optimizer: OptimState,
    pub critic: Option<Vec<NamedArray>>,
    pub critic_optimizer: Option<OptimState>,
    pub previous: Option<Vec<NamedArray>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub spec: ClassifierSpec,
    pub params: Vec<NamedArray>,
    /// SHA-256 of the run's resolved configuration.
    pub config_digest: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub heldout: Option<HeldoutRecord>,
    pub resume: Option<ResumeState>,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    magic: [u8; 8],
    format: u32,
    payload_sha256: String,
    payload: Vec<u8>,
}

impl Checkpoint {
    pub fn from_classifier(model: &Classifier, config_digest: impl Into<String>, epoch: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            spec: *model.spec(),
            params: model.store().to_named(),
            config_digest: config_digest.into(),
            epoch,
            heldout: None,
            resume: None,
        }
    }

    /// Rebuilds a trainable classifier carrying these parameters.
    pub fn to_classifier(&self) -> Result<Classifier> {
        let mut model = Classifier::build(self.spec, 0)?;
        model.store_unchecked_mut().load_named(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = bincode::serialize(self).map_err(|e| Error::InvalidArgument(format!("checkpoint encoding: {e}")))?;
        let env = Envelope { magic: *MAGIC, format: CHECKPOINT_FORMAT, payload_sha256: sha256_hex(&payload), payload };
        bincode::serialize(&env).map_err(|e| Error::InvalidArgument(format!("checkpoint encoding: {e}")))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |message: String| Error::Corrupt { path: path.to_path_buf(), message };
        let env: Envelope = bincode::deserialize(bytes).map_err(|e| corrupt(format!("unreadable envelope: {e}")))?;
        if &env.magic != MAGIC {
            return Err(corrupt("not a checkpoint file".into()));
        }
        if env.format != CHECKPOINT_FORMAT {
            return Err(corrupt(format!("unsupported format {}", env.format)));
        }
        if sha256_hex(&env.payload) != env.payload_sha256 {
            return Err(corrupt("payload checksum mismatch".into()));
        }
        bincode::deserialize(&env.payload).map_err(|e| corrupt(format!("unreadable payload: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// Loads a phase-1 checkpoint as a frozen model after checking its spec.
pub fn load_superior(path: &Path, spec: &ClassifierSpec) -> Result<(Classifier, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    if &ckpt.spec != spec {
        return Err(Error::SpecMismatch(format!(
            "checkpoint {} holds {:?}, expected {:?}",
            path.display(),
            ckpt.spec,
            spec
        )));
    }
    let mut model = ckpt.to_classifier()?;
    model.freeze();
    Ok((model, ckpt))
}
