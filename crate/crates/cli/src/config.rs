//! The TOML run document and its resolution against defaults.

use std::path::{Path, PathBuf};

use aikd::augment::AugmentPolicy;
use aikd::data::{generate_synthetic, inject_label_noise, load_dataset, Dataset, DatasetManifest, SyntheticSpec};
use aikd::losses::LossWeights;
use aikd::metrics::DEFAULT_BINS;
use aikd::models::{Architecture, ClassifierSpec};
use aikd::optim::{AdamConfig, SgdConfig};
use aikd::training::{Ablation, CriticOptions, Phase, TeacherInput, TrainConfig};
use aikd::util::sha256_hex;
use aikd::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "AIKD_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub architecture: Architecture,
    /// Taken from the dataset when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_resolution: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { architecture: Architecture::TinyCnn, num_classes: None, input_resolution: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub critic_opt: AdamConfig,
    pub critic_steps_per_student_step: usize,
    pub include_superior_term: bool,
    pub seed: u64,
    pub ablation: Ablation,
    pub teacher_input: TeacherInput,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            sgd: t.sgd,
            lr_milestones: t.lr_milestones,
            lr_gamma: t.lr_gamma,
            critic_opt: t.critic_opt,
            critic_steps_per_student_step: t.critic_steps_per_student_step,
            include_superior_term: t.include_superior_term,
            seed: t.seed,
            ablation: t.ablation,
            teacher_input: t.teacher_input,
        }
    }
}

/// Exactly one of `preset`, `manifest` or `synthetic` selects the data; with
/// none of them the default synthetic set is used.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<DatasetManifest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Fraction of training labels replaced by a different random class.
    pub label_noise: f64,
    /// Seed of the label corruption; the training seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_noise_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub n_bins: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { n_bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunDocument {
    pub model: ModelSection,
    pub train: TrainSection,
    pub weights: LossWeights,
    pub critic: CriticOptions,
    pub augment: AugmentPolicy,
    pub data: DataSection,
    pub metrics: MetricsSection,
}

impl RunDocument {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let key = message
                .split('`')
                .nth(1)
                .filter(|_| message.starts_with("unknown field"))
                .unwrap_or("")
                .to_string();
            Error::Config { key, message }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = aikd::util::read_file(path)?;
        Self::parse(&String::from_utf8_lossy(&bytes))
    }

    /// Fills every default so the document describes the run completely.
    pub fn resolve(mut self, seed: Option<u64>, env_root: Option<PathBuf>) -> Result<Resolved> {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        let chosen = [self.data.preset.is_some(), self.data.manifest.is_some(), self.data.synthetic.is_some()];
        if chosen.iter().filter(|&&c| c).count() > 1 {
            return Err(Error::Config {
                key: "data".into(),
                message: "set only one of preset, manifest and synthetic".into(),
            });
        }
        let manifest = match (&self.data.preset, &self.data.manifest, &self.data.synthetic) {
            (Some(name), _, _) => DatasetManifest::preset(name)?,
            (_, Some(m), _) => m.clone(),
            (_, _, Some(s)) => synthetic_manifest(s)?,
            _ => {
                self.data.synthetic = Some(SyntheticSpec::default());
                synthetic_manifest(&SyntheticSpec::default())?
            }
        };
        manifest.validate()?;
        if self.data.root.is_none() && self.data.synthetic.is_none() {
            self.data.root = env_root;
        }
        if !(0.0..1.0).contains(&self.data.label_noise) {
            return Err(Error::Config { key: "data.label_noise".into(), message: "must lie in [0, 1)".into() });
        }
        self.model.num_classes.get_or_insert(manifest.num_classes);
        self.model.input_resolution.get_or_insert(manifest.resolution);
        let spec = ClassifierSpec {
            architecture: self.model.architecture,
            num_classes: self.model.num_classes.unwrap_or(manifest.num_classes),
            input_resolution: self.model.input_resolution.unwrap_or(manifest.resolution),
        };
        spec.validate()?;
        if self.metrics.n_bins == 0 {
            return Err(Error::Config { key: "metrics.n_bins".into(), message: "must be positive".into() });
        }
        let resolved = Resolved { document: self, spec, manifest };
        resolved.train_config(Phase::Pretrain).validate()?;
        Ok(resolved)
    }
}

fn synthetic_manifest(spec: &SyntheticSpec) -> Result<DatasetManifest> {
    // Only the manifest is needed here; the images are generated on load.
    let tiny = SyntheticSpec { samples_per_class: 1, val_per_class: 1, ..spec.clone() };
    let mut m = generate_synthetic(&tiny)?.manifest;
    m.train_count = spec.num_classes * spec.samples_per_class;
    m.val_count = spec.num_classes * spec.val_per_class;
    m.synthetic = Some(spec.clone());
    Ok(m)
}

/// A fully resolved run description.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub document: RunDocument,
    pub spec: ClassifierSpec,
    pub manifest: DatasetManifest,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    #[serde(flatten)]
    document: &'a RunDocument,
    resolved_manifest: &'a DatasetManifest,
}

impl Resolved {
    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        let d = &self.document;
        let t = d.train.clone();
        TrainConfig {
            phase,
            epochs: t.epochs,
            batch_size: t.batch_size,
            sgd: t.sgd,
            lr_milestones: t.lr_milestones,
            lr_gamma: t.lr_gamma,
            critic_opt: t.critic_opt,
            weights: d.weights,
            critic_steps_per_student_step: t.critic_steps_per_student_step,
            include_superior_term: t.include_superior_term,
            seed: t.seed,
            ablation: t.ablation,
            critic: d.critic,
            augment: d.augment,
            teacher_input: t.teacher_input,
            n_bins: d.metrics.n_bins,
        }
    }

    /// The document with every default expanded, as TOML.
    pub fn snapshot(&self) -> Result<String> {
        let snap = Snapshot { document: &self.document, resolved_manifest: &self.manifest };
        toml::to_string_pretty(&snap).map_err(|e| Error::InvalidArgument(format!("snapshot encoding: {e}")))
    }

    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.snapshot()?.as_bytes()))
    }

    /// Loads the dataset and applies any configured label noise to the
    /// training split.
    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.document.data;
        let root = d.root.clone().unwrap_or_else(|| PathBuf::from("."));
        let mut data = load_dataset(&self.manifest, &root)?;
        if d.label_noise > 0.0 {
            let seed = d.label_noise_seed.unwrap_or(self.document.train.seed);
            let noisy = inject_label_noise(data.train.labels(), self.manifest.num_classes, d.label_noise, seed)?;
            data.train = data.train.with_labels(noisy)?;
        }
        Ok(data)
    }
}
