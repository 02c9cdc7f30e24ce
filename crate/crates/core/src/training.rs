//! Phase-1 pretraining and phase-2 adversarial self-distillation.
//!
//! Both phases share one epoch loop. Each distillation step first updates the
//! critic on detached student logits against the superior model's logits, then
//! updates the student on
//! `(1 - a_P - a_G) CE + a_P L_P + a_G L_G + w L_A` through the updated critic.
//! The previous-epoch snapshot is refreshed at every epoch boundary.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, epoch or
//! step, ...)`, so a run restored from an epoch checkpoint replays the same
//! batches, augmentations and penalty interpolants as an uninterrupted run.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use aikd_autograd::Tensor;
use ndarray::{Array2, Array4, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, mixed_ce, AugmentPolicy, MixedBatch};
use crate::data::{epoch_iterator, normalize, Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, critic_loss, gradient_penalty, guide_loss, kd_kl, progressive_loss, soften, total_loss, HardLabels,
    LogitsBatch, LossWeights, SoftDistribution,
};
use crate::metrics::{evaluate_predictions, MetricsReport, PredictionSet, ReliabilityBins, DEFAULT_BINS};
use crate::models::{
    accuracy, load_superior, Checkpoint, Classifier, ClassifierSpec, Critic, CriticSpec, HeldoutRecord, ModelTriple,
    NormMode, ResumeState,
};
use crate::optim::{multistep_lr, Adam, AdamConfig, Sgd, SgdConfig};
use crate::util::{read_file, stream, to_json_line, to_json_pretty, write_file, Stream};

/// Held-out accuracy recorded in a checkpoint must be reproduced within this.
pub const HELDOUT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Distill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoAdv,
    OnlyProgressive,
    OnlyGuide,
    Baseline,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::NoAdv, Ablation::OnlyProgressive, Ablation::OnlyGuide, Ablation::Baseline];

    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| Error::config("train.ablation", format!("unknown preset `{name}`")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoAdv => "no_adv",
            Ablation::OnlyProgressive => "only_progressive",
            Ablation::OnlyGuide => "only_guide",
            Ablation::Baseline => "baseline",
        }
    }
}

/// Zeroes the weights a preset switches off.
pub fn apply_ablation(preset: Ablation, weights: LossWeights) -> LossWeights {
    match preset {
        Ablation::Full => weights,
        Ablation::NoAdv => LossWeights { omega: 0.0, ..weights },
        Ablation::OnlyProgressive => LossWeights { alpha_g: 0.0, omega: 0.0, ..weights },
        Ablation::OnlyGuide => LossWeights { alpha_p: 0.0, omega: 0.0, ..weights },
        Ablation::Baseline => LossWeights { alpha_g: 0.0, alpha_p: 0.0, omega: 0.0, ..weights },
    }
}

/// Whether the effective weights use the superior model at all.
pub fn needs_superior(weights: &LossWeights) -> bool {
    weights.alpha_g > 0.0 || weights.omega > 0.0
}

/// Which images the teachers see when a mixing augmentation is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherInput {
    /// The same mixed images as the student.
    Mixed,
    /// The unmixed images; soft targets are mixed with the batch's ratio.
    Unmixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticOptions {
    pub hidden1: usize,
    pub hidden2: usize,
    pub leaky_slope: f64,
}

impl Default for CriticOptions {
    fn default() -> Self {
        let s = CriticSpec::new(2);
        CriticOptions { hidden1: s.hidden1, hidden2: s.hidden2, leaky_slope: s.leaky_slope }
    }
}

impl CriticOptions {
    pub fn spec(&self, classes: usize) -> CriticSpec {
        CriticSpec { input_dim: classes, hidden1: self.hidden1, hidden2: self.hidden2, leaky_slope: self.leaky_slope }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub critic_opt: AdamConfig,
    pub weights: LossWeights,
    pub critic_steps_per_student_step: usize,
    pub include_superior_term: bool,
    pub seed: u64,
    pub ablation: Ablation,
    pub critic: CriticOptions,
    pub augment: AugmentPolicy,
    pub teacher_input: TeacherInput,
    pub n_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Distill,
            epochs: 300,
            batch_size: 128,
            sgd: SgdConfig::default(),
            lr_milestones: vec![150, 225],
            lr_gamma: 0.1,
            critic_opt: AdamConfig::default(),
            weights: LossWeights::default(),
            critic_steps_per_student_step: 1,
            include_superior_term: false,
            seed: 0,
            ablation: Ablation::Full,
            critic: CriticOptions::default(),
            augment: AugmentPolicy::default(),
            teacher_input: TeacherInput::Mixed,
            n_bins: DEFAULT_BINS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("train.lr_milestones", "must be strictly increasing"));
        }
        if self.lr_milestones.iter().any(|&m| m >= self.epochs) {
            return Err(Error::config("train.lr_milestones", format!("must be below epochs ({})", self.epochs)));
        }
        if !(self.lr_gamma > 0.0) {
            return Err(Error::config("train.lr_gamma", "must be positive"));
        }
        if !(self.sgd.lr >= 0.0) || !(0.0..1.0).contains(&self.sgd.momentum) || !(self.sgd.weight_decay >= 0.0) {
            return Err(Error::config("train.sgd", "lr and weight_decay must be non-negative, momentum in [0, 1)"));
        }
        if !(self.critic_opt.lr >= 0.0) {
            return Err(Error::config("train.critic_opt.lr", "must be non-negative"));
        }
        if self.critic_steps_per_student_step == 0 {
            return Err(Error::config("train.critic_steps_per_student_step", "must be positive"));
        }
        if self.n_bins == 0 {
            return Err(Error::config("metrics.n_bins", "must be positive"));
        }
        self.weights.validate()?;
        self.augment.validate()?;
        self.critic.spec(2).validate().map_err(|e| Error::config("critic", e.to_string()))
    }

    /// Weights in force for this run: the preset for distillation, plain
    /// cross-entropy for pretraining.
    pub fn effective_weights(&self) -> LossWeights {
        match self.phase {
            Phase::Distill => apply_ablation(self.ablation, self.weights),
            Phase::Pretrain => apply_ablation(Ablation::Baseline, self.weights),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        multistep_lr(self.sgd.lr, &self.lr_milestones, self.lr_gamma, epoch)
    }
}

/// Loss components of one student step. `ce_weight` is the coefficient the
/// cross-entropy actually received.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub ce: f64,
    pub lg: f64,
    pub lp: f64,
    pub la: f64,
    pub ld: f64,
    pub total: f64,
    pub lr: f64,
    pub ce_weight: f64,
}

impl StepRecord {
    fn is_finite(&self) -> bool {
        [self.ce, self.lg, self.lp, self.la, self.ld, self.total].iter().all(|v| v.is_finite())
    }
}

/// Summary written after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train_total: f64,
    pub train_ce: f64,
    pub val_accuracy: f64,
    pub val: MetricsReport,
    pub student_hash: String,
    /// Snapshot in force during the epoch, before and after its steps.
    pub previous_hash_start: String,
    pub previous_hash_end: String,
    pub superior_hash_start: Option<String>,
    pub superior_hash_end: Option<String>,
}

/// All mutable state of a run between steps.
pub struct RunState {
    pub epoch: usize,
    pub global_step: u64,
    pub triple: ModelTriple,
    pub critic: Option<Critic>,
    pub student_opt: Sgd,
    pub critic_opt: Adam,
}

impl RunState {
    pub fn new(cfg: &TrainConfig, student: Classifier, superior: Option<Classifier>) -> Result<Self> {
        let classes = student.num_classes();
        let weights = cfg.effective_weights();
        let critic = if weights.omega > 0.0 { Some(Critic::build(cfg.critic.spec(classes), cfg.seed)?) } else { None };
        Ok(RunState {
            epoch: 0,
            global_step: 0,
            triple: ModelTriple::new(student, superior)?,
            critic,
            student_opt: Sgd::new(cfg.sgd),
            critic_opt: Adam::new(cfg.critic_opt),
        })
    }

    fn resume_state(&self) -> ResumeState {
        ResumeState {
            global_step: self.global_step,
            student_optimizer: self.student_opt.state(),
            critic: self.critic.as_ref().map(|c| c.store().to_named()),
            critic_optimizer: self.critic.as_ref().map(|_| self.critic_opt.state()),
            previous: Some(self.triple.previous.store().to_named()),
        }
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let resume = ckpt.resume.as_ref().ok_or_else(|| Error::SpecMismatch("checkpoint carries no resume state".into()))?;
        self.triple.student.store_mut()?.load_named(&ckpt.params)?;
        match &resume.previous {
            Some(prev) => {
                let mut p = self.triple.previous.unfrozen();
                p.store_mut()?.load_named(prev)?;
                p.freeze();
                self.triple.previous = p;
            }
            None => self.triple.snapshot_previous(),
        }
        if let (Some(critic), Some(params)) = (self.critic.as_mut(), &resume.critic) {
            critic.store_mut().load_named(params)?;
        }
        if let Some(state) = &resume.critic_optimizer {
            self.critic_opt.load_state(state)?;
        }
        self.student_opt.load_state(&resume.student_optimizer)?;
        self.global_step = resume.global_step;
        self.epoch = ckpt.epoch;
        Ok(())
    }
}

/// A training batch after augmentation and normalization. `teacher_images`
/// holds the unmixed images when teachers should not see the mixed ones.
pub struct Batch {
    pub mixed: MixedBatch,
    pub teacher_images: Option<Array4<f64>>,
}

/// Augments and normalizes the samples at `indices`; randomness comes from
/// the `(seed, epoch, batch)` stream.
pub fn prepare_batch(
    split: &Split,
    indices: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
    norm: &Normalization,
    epoch: usize,
    batch_index: usize,
) -> Result<Batch> {
    let images = split.batch(indices);
    let labels = HardLabels::new(split.labels_at(indices), num_classes)?;
    let mut rng = stream(cfg.seed, Stream::Augment, &[epoch as u64, batch_index as u64]);
    let unmixed_policy = AugmentPolicy { extra: crate::augment::ExtraAugment::None, ..cfg.augment };
    let is_mixing = matches!(cfg.augment.extra, crate::augment::ExtraAugment::Mixup | crate::augment::ExtraAugment::Cutmix);
    let (mut mixed, mut teacher_images) = if is_mixing && cfg.teacher_input == TeacherInput::Unmixed {
        let base = apply_policy(&images, &labels, &unmixed_policy, &mut rng)?;
        let policy = AugmentPolicy { standard: false, ..cfg.augment };
        let mixed = apply_policy(&base.images, &labels, &policy, &mut rng)?;
        (mixed, Some(base.images))
    } else {
        (apply_policy(&images, &labels, &cfg.augment, &mut rng)?, None)
    };
    normalize(&mut mixed.images, norm);
    if let Some(t) = teacher_images.as_mut() {
        normalize(t, norm);
    }
    Ok(Batch { mixed, teacher_images })
}

fn logits_array(t: &Tensor) -> Array2<f64> {
    t.value().view().into_dimensionality::<Ix2>().expect("logits are 2-D").to_owned()
}

fn teacher_logits(model: &Classifier, images: &Array4<f64>) -> Result<LogitsBatch> {
    LogitsBatch::from_array(model.predict(images.view())?)
}

/// Row-mixed softened teacher distribution: `lam p + (1 - lam) p[perm]`.
fn mixed_targets(logits: &LogitsBatch, batch: &MixedBatch, tau: f64) -> Result<SoftDistribution> {
    let p = logits_array(soften(logits, tau)?.probs());
    let shuffled = p.select(ndarray::Axis(0), &batch.perm);
    let mix = &p * batch.lam + &shuffled * (1.0 - batch.lam);
    SoftDistribution::from_probs(Tensor::constant(mix.into_dyn()), tau)
}

fn distill_term(
    teacher: &LogitsBatch,
    student: &LogitsBatch,
    tau: f64,
    batch: &Batch,
    guide: bool,
) -> Result<Tensor> {
    if batch.teacher_images.is_some() && batch.mixed.lam < 1.0 {
        let targets = mixed_targets(teacher, &batch.mixed, tau)?;
        kd_kl(&targets, &soften(student, tau)?, tau)
    } else if guide {
        guide_loss(teacher, student, tau)
    } else {
        progressive_loss(teacher, student, tau)
    }
}

/// One critic update followed by one student update on the same batch.
pub fn distill_step(state: &mut RunState, batch: &Batch, weights: &LossWeights, cfg: &TrainConfig, lr: f64) -> Result<StepRecord> {
    let epoch = state.epoch;
    let step = state.global_step;
    let teacher_images = batch.teacher_images.as_ref().unwrap_or(&batch.mixed.images);
    let superior_logits = match (&state.triple.superior, needs_superior(weights)) {
        (Some(sup), true) => Some(teacher_logits(sup, teacher_images)?),
        (None, true) => return Err(Error::InvalidArgument("weights use the superior model but none is loaded".into())),
        _ => None,
    };
    let progressive_active = weights.alpha_p > 0.0 && epoch > 0;
    let previous_logits = if progressive_active { Some(teacher_logits(&state.triple.previous, teacher_images)?) } else { None };
    let ce_weight = weights.alpha_ce() + if progressive_active { 0.0 } else { weights.alpha_p };

    let student = &state.triple.student;
    let sf = student.context(true);
    let images = Tensor::constant(batch.mixed.images.clone().into_dyn());
    let out = student.forward(&sf, &images, NormMode::Train)?;
    if !out.value().iter().all(|v| v.is_finite()) {
        let nan = f64::NAN;
        let record = StepRecord { step, epoch, ce: nan, lg: nan, lp: nan, la: nan, ld: nan, total: nan, lr, ce_weight };
        return Err(Error::NonFinite { step, record: to_json_line(&record)? });
    }
    let z = LogitsBatch::new(out)?;

    // Critic updates on detached student logits.
    let mut ld = 0.0;
    if let (Some(critic), true) = (state.critic.as_mut(), weights.omega > 0.0) {
        let sup = superior_logits.as_ref().expect("omega > 0 requires the superior model");
        let z_fixed = z.detach();
        for k in 0..cfg.critic_steps_per_student_step {
            let mut rng = stream(cfg.seed, Stream::GradientPenalty, &[step, k as u64]);
            let eps: Vec<f64> = (0..z.batch()).map(|_| rng.gen::<f64>()).collect();
            let (grads, updates, loss) = {
                let cf = critic.context(true);
                let s_stu = critic.scores(&cf, z_fixed.tensor(), NormMode::Train)?;
                let s_sup = if cfg.include_superior_term {
                    Some(critic.scores(&cf, sup.tensor(), NormMode::Train)?)
                } else {
                    None
                };
                let gp = gradient_penalty(&critic.penalty_view(&cf), sup, &z_fixed, &eps)?;
                let loss = critic_loss(&s_stu, s_sup.as_ref(), &gp, weights, cfg.include_superior_term)?;
                (cf.gradients(&loss)?, cf.take_updates(), loss.item())
            };
            critic.apply_buffer_updates(updates);
            state.critic_opt.step(critic.store_mut(), &grads)?;
            ld = loss;
        }
    }

    // Student objective.
    let probs = soften(&z, 1.0)?;
    let ce = mixed_ce(&probs, &batch.mixed)?;
    let zero = Tensor::scalar(0.0);
    let lg = match &superior_logits {
        Some(sup) if weights.alpha_g > 0.0 => distill_term(sup, &z, weights.tau_g, batch, true)?,
        _ => zero.clone(),
    };
    let lp = match &previous_logits {
        Some(prev) => distill_term(prev, &z, weights.tau_p, batch, false)?,
        None => zero.clone(),
    };
    let la = match (&state.critic, weights.omega > 0.0) {
        (Some(critic), true) => {
            let cf = critic.context(false);
            adversarial_loss(&critic.scores(&cf, z.tensor(), NormMode::Train)?)?
        }
        _ => zero.clone(),
    };
    // Before the first snapshot exists the progressive weight goes to the
    // cross-entropy term.
    let lp_term = if weights.alpha_p > 0.0 && !progressive_active { ce.clone() } else { lp.clone() };
    let total = total_loss(&ce, &lp_term, &lg, &la, weights).or_else(|e| match e {
        Error::InvalidArgument(_) => Ok(Tensor::scalar(f64::NAN)),
        other => Err(other),
    })?;
    let record = StepRecord {
        step,
        epoch,
        ce: ce.item(),
        lg: lg.item(),
        lp: lp.item(),
        la: la.item(),
        ld,
        total: total.item(),
        lr,
        ce_weight,
    };
    if !record.is_finite() {
        return Err(Error::NonFinite { step, record: to_json_line(&record)? });
    }
    let grads = sf.gradients(&total)?;
    let updates = sf.take_updates();
    drop(sf);
    let store = state.triple.student.store_mut()?;
    store.apply_buffer_updates(updates);
    state.student_opt.step(store, &grads, lr)?;
    state.global_step += 1;
    Ok(record)
}

/// Where and how a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Phase directory receiving checkpoints and logs.
    pub out_dir: PathBuf,
    pub config_digest: String,
    /// Epoch checkpoint to continue from.
    pub resume_from: Option<PathBuf>,
    /// Stop after this many completed epochs.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub checkpoint: PathBuf,
    pub epochs: Vec<EpochRecord>,
    pub metrics: MetricsReport,
    pub reliability: ReliabilityBins,
    pub student: Classifier,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_epoch_{epoch}"))
}

fn check_data(spec: &ClassifierSpec, data: &Dataset) -> Result<()> {
    if data.manifest.num_classes != spec.num_classes {
        return Err(Error::SpecMismatch(format!(
            "dataset `{}` has {} classes, model expects {}",
            data.manifest.name, data.manifest.num_classes, spec.num_classes
        )));
    }
    if data.manifest.resolution != spec.input_resolution {
        return Err(Error::SpecMismatch(format!(
            "dataset `{}` is {}px, model expects {}px",
            data.manifest.name, data.manifest.resolution, spec.input_resolution
        )));
    }
    Ok(())
}

/// Normalized images of a whole split.
pub fn split_images(split: &Split, norm: &Normalization) -> Array4<f64> {
    let mut x = split.all_images();
    normalize(&mut x, norm);
    x
}

pub fn predictions(model: &Classifier, split: &Split, norm: &Normalization) -> Result<PredictionSet> {
    PredictionSet::new(model.predict(split_images(split, norm).view())?, split.labels().to_vec())
}

fn heldout_record(model: &Classifier, data: &Dataset) -> Result<HeldoutRecord> {
    let logits = model.predict(split_images(&data.val, &data.manifest.normalization).view())?;
    Ok(HeldoutRecord { split: "val".into(), accuracy: accuracy(&logits, data.val.labels()), n_samples: data.val.len() })
}

/// Loads a frozen superior model and confirms its recorded held-out accuracy.
pub fn load_verified_superior(path: &Path, spec: &ClassifierSpec, data: &Dataset) -> Result<Classifier> {
    let (model, ckpt) = load_superior(path, spec)?;
    if let Some(recorded) = &ckpt.heldout {
        let now = heldout_record(&model, data)?;
        if recorded.n_samples != now.n_samples || (recorded.accuracy - now.accuracy).abs() > HELDOUT_TOLERANCE {
            return Err(Error::SpecMismatch(format!(
                "superior checkpoint records {} accuracy on {} samples, measured {} on {}",
                recorded.accuracy, recorded.n_samples, now.accuracy, now.n_samples
            )));
        }
    }
    Ok(model)
}

fn read_log_prefix(path: &Path, before_epoch: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
    let mut keep = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["epoch"].as_u64().map_or(false, |e| (e as usize) < before_epoch) {
            keep.push(line.to_string());
        }
    }
    Ok(keep)
}

struct LogFile(std::fs::File, PathBuf);

impl LogFile {
    fn create(path: PathBuf, prefix: &[String]) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for line in prefix {
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(LogFile(f, path))
    }

    fn append<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = to_json_line(value)?;
        writeln!(self.0, "{line}").map_err(|e| Error::io(&self.1, e))
    }
}

fn run(cfg: &TrainConfig, data: &Dataset, mut state: RunState, opts: &RunOptions) -> Result<RunOutcome> {
    let weights = cfg.effective_weights();
    let norm = &data.manifest.normalization;
    let classes = data.manifest.num_classes;
    let dir = &opts.out_dir;
    let start = state.epoch;
    let mut steps_log = LogFile::create(dir.join("log.jsonl"), &read_log_prefix(&dir.join("log.jsonl"), start)?)?;
    let mut epochs_log = LogFile::create(dir.join("epochs.jsonl"), &read_log_prefix(&dir.join("epochs.jsonl"), start)?)?;
    let mut records = Vec::new();
    let last = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut ckpt_path = checkpoint_path(dir, start);
    for epoch in start..last {
        state.epoch = epoch;
        let lr = cfg.lr_at(epoch);
        let previous_hash_start = state.triple.previous.checksum();
        let superior_hash_start = state.triple.superior.as_ref().map(Classifier::checksum);
        let (mut total_sum, mut ce_sum, mut steps) = (0.0, 0.0, 0usize);
        for (bi, idx) in epoch_iterator(data.train.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            let batch = prepare_batch(&data.train, idx, classes, cfg, norm, epoch, bi)?;
            let record = match distill_step(&mut state, &batch, &weights, cfg, lr) {
                Ok(r) => r,
                Err(Error::NonFinite { step, record }) => {
                    write_file(&dir.join("abort.json"), format!("{record}\n"))?;
                    return Err(Error::NonFinite { step, record });
                }
                Err(e) => return Err(e),
            };
            steps_log.append(&record)?;
            total_sum += record.total;
            ce_sum += record.ce;
            steps += 1;
        }
        let previous_hash_end = state.triple.previous.checksum();
        let superior_hash_end = state.triple.superior.as_ref().map(Classifier::checksum);
        state.triple.snapshot_previous();
        let preds = predictions(&state.triple.student, &data.val, norm)?;
        let (val, _) = evaluate_predictions(&preds, cfg.n_bins, false)?;
        let record = EpochRecord {
            epoch,
            lr,
            steps,
            train_total: total_sum / steps.max(1) as f64,
            train_ce: ce_sum / steps.max(1) as f64,
            val_accuracy: accuracy(preds.logits(), preds.labels()),
            val,
            student_hash: state.triple.student.checksum(),
            previous_hash_start,
            previous_hash_end,
            superior_hash_start,
            superior_hash_end,
        };
        epochs_log.append(&record)?;
        state.epoch = epoch + 1;
        let mut ckpt = Checkpoint::from_classifier(&state.triple.student, &opts.config_digest, epoch + 1);
        ckpt.heldout = Some(HeldoutRecord {
            split: "val".into(),
            accuracy: record.val_accuracy,
            n_samples: preds.len(),
        });
        ckpt.resume = Some(state.resume_state());
        ckpt_path = checkpoint_path(dir, epoch + 1);
        ckpt.save(&ckpt_path)?;
        records.push(record);
    }
    let mut student = state.triple.student.clone();
    student.freeze();
    let preds = predictions(&student, &data.val, norm)?;
    let (metrics, reliability) = evaluate_predictions(&preds, cfg.n_bins, true)?;
    write_file(&dir.join("metrics.json"), to_json_pretty(&metrics)?)?;
    write_file(&dir.join("reliability.csv"), reliability.to_csv())?;
    Ok(RunOutcome { checkpoint: ckpt_path, epochs: records, metrics, reliability, student })
}

fn restore_if_requested(state: &mut RunState, opts: &RunOptions, spec: &ClassifierSpec) -> Result<()> {
    if let Some(path) = &opts.resume_from {
        let ckpt = Checkpoint::load(path)?;
        if &ckpt.spec != spec {
            return Err(Error::SpecMismatch(format!("resume checkpoint holds {:?}, expected {:?}", ckpt.spec, spec)));
        }
        if ckpt.config_digest != opts.config_digest {
            return Err(Error::SpecMismatch("resume checkpoint was written under a different configuration".into()));
        }
        state.restore(&ckpt)?;
    }
    Ok(())
}

/// Phase 1: cross-entropy training of a single classifier from scratch.
pub fn pretrain(cfg: &TrainConfig, spec: ClassifierSpec, data: &Dataset, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.phase != Phase::Pretrain {
        return Err(Error::config("train.phase", "pretrain requires phase = \"pretrain\""));
    }
    check_data(&spec, data)?;
    let student = Classifier::build(spec, cfg.seed)?;
    let mut state = RunState::new(cfg, student, None)?;
    restore_if_requested(&mut state, opts, &spec)?;
    run(cfg, data, state, opts)
}

/// Phase 2: distillation of a freshly initialized student. `superior` may be
/// omitted when the preset uses neither the guide nor the adversarial term.
pub fn distill(cfg: &TrainConfig, spec: ClassifierSpec, data: &Dataset, superior: Option<&Path>, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.phase != Phase::Distill {
        return Err(Error::config("train.phase", "distill requires phase = \"distill\""));
    }
    check_data(&spec, data)?;
    let weights = cfg.effective_weights();
    let superior = if needs_superior(&weights) {
        let path = superior.ok_or_else(|| {
            Error::config(
                "superior",
                format!("the `{}` preset needs a phase-1 checkpoint of the superior model", cfg.ablation.name()),
            )
        })?;
        Some(load_verified_superior(path, &spec, data)?)
    } else {
        None
    };
    let student = Classifier::build(spec, cfg.seed)?;
    let mut state = RunState::new(cfg, student, superior)?;
    restore_if_requested(&mut state, opts, &spec)?;
    run(cfg, data, state, opts)
}

/// Runs both phases under `out/phase1` and `out/phase2`.
pub fn run_two_phase(
    pre: &TrainConfig,
    dist: &TrainConfig,
    spec: ClassifierSpec,
    data: &Dataset,
    out: &Path,
    config_digest: &str,
) -> Result<(RunOutcome, RunOutcome)> {
    let p1 = pretrain(pre, spec, data, &RunOptions { out_dir: out.join("phase1"), config_digest: config_digest.into(), ..Default::default() })?;
    let p2 = distill(
        dist,
        spec,
        data,
        Some(&p1.checkpoint),
        &RunOptions { out_dir: out.join("phase2"), config_digest: config_digest.into(), ..Default::default() },
    )?;
    Ok((p1, p2))
}

/// Parses a `log.jsonl` file into step records.
pub fn read_step_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Parses an `epochs.jsonl` file.
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Runs `steps` critic updates on one fixed batch of logits without touching
/// any classifier, returning the critic loss before each update.
pub fn critic_only_steps(
    critic: &mut Critic,
    opt: &mut Adam,
    superior: &LogitsBatch,
    student: &LogitsBatch,
    weights: &LossWeights,
    include_superior_term: bool,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut rng = stream(seed, Stream::GradientPenalty, &[k as u64]);
        let eps: Vec<f64> = (0..student.batch()).map(|_| rng.gen::<f64>()).collect();
        let (grads, updates, loss) = {
            let cf = critic.context(true);
            let s_stu = critic.scores(&cf, student.tensor(), NormMode::Train)?;
            let s_sup = if include_superior_term { Some(critic.scores(&cf, superior.tensor(), NormMode::Train)?) } else { None };
            let gp = gradient_penalty(&critic.penalty_view(&cf), superior, student, &eps)?;
            let loss = critic_loss(&s_stu, s_sup.as_ref(), &gp, weights, include_superior_term)?;
            (cf.gradients(&loss)?, cf.take_updates(), loss.item())
        };
        critic.apply_buffer_updates(updates);
        opt.step(critic.store_mut(), &grads)?;
        losses.push(loss);
    }
    Ok(losses)
}
