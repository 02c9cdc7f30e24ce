//! Loss terms of the adversarially regularized self-distillation objective.
//!
//! Student objective:
//!
//! ```text
//! L = (1 - a_P - a_G) CE(y, p_t) + a_P L_P + a_G L_G + w L_A
//! L_G = tau_G^2 KL(p_sup(tau_G) || p_t(tau_G))
//! L_P = tau_P^2 KL(p_prev(tau_P) || p_t(tau_P))
//! L_A = -E[D(z_t)]
//! ```
//!
//! and the critic minimizes `E[D(z_t)] (- E[D(z_sup)]) + lambda * GP`.
//!
//! All batch reductions are arithmetic means. Teacher-side inputs are
//! detached inside every distillation term, so no gradient reaches the
//! networks that produced them.

use aikd_autograd::{enable_grad, grad, Array, Tensor};
use ndarray::{Array2, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are floored before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Added under the square root of the gradient norm so its derivative stays
/// finite at zero gradient.
const GRAD_NORM_EPS: f64 = 1e-30;

/// Validated `(B, C)` logits with `B >= 1`, `C >= 2` and finite entries.
#[derive(Debug, Clone)]
pub struct LogitsBatch(Tensor);

impl LogitsBatch {
    pub fn new(values: Tensor) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!("logits must be (B, C), got {shape:?}")));
        }
        if shape[0] < 1 || shape[1] < 2 {
            return Err(Error::ShapeMismatch(format!("logits need B >= 1 and C >= 2, got {shape:?}")));
        }
        if values.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("logits contain NaN or infinity".into()));
        }
        Ok(LogitsBatch(values))
    }

    pub fn from_array(values: Array2<f64>) -> Result<Self> {
        Self::new(Tensor::constant(values.into_dyn()))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn detach(&self) -> LogitsBatch {
        LogitsBatch(self.0.detach())
    }

    fn same_shape(&self, other: &LogitsBatch) -> Result<()> {
        if self.0.shape() != other.0.shape() {
            return Err(Error::ShapeMismatch(format!(
                "logits {:?} vs {:?}",
                self.0.shape(),
                other.0.shape()
            )));
        }
        Ok(())
    }
}

/// Class indices, each below `num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardLabels {
    labels: Vec<usize>,
    num_classes: usize,
}

impl HardLabels {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(HardLabels { labels, num_classes })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(B, C)` indicator matrix.
    pub fn one_hot(&self) -> Array {
        let mut m = Array2::<f64>::zeros((self.labels.len(), self.num_classes));
        for (row, &l) in self.labels.iter().enumerate() {
            m[[row, l]] = 1.0;
        }
        m.into_dyn()
    }
}

/// Row-wise categorical distributions softened at `temperature`.
///
/// Log-probabilities are carried alongside the probabilities. When built by
/// [`soften`] they come from a stable log-softmax; when built from raw
/// probabilities they are `ln(max(p, PROB_FLOOR))`.
#[derive(Debug, Clone)]
pub struct SoftDistribution {
    probs: Tensor,
    log_probs: Tensor,
    temperature: f64,
}

impl SoftDistribution {
    /// Wraps externally computed `(B, C)` probabilities.
    pub fn from_probs(probs: Tensor, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        if probs.ndim() != 2 || probs.shape()[1] < 2 {
            return Err(Error::ShapeMismatch(format!("probabilities must be (B, C>=2), got {:?}", probs.shape())));
        }
        if probs.value().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        for (i, s) in probs.value().sum_axis(Axis(1)).iter().enumerate() {
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!("row {i} sums to {s}")));
            }
        }
        let log_probs = probs.clamp_min(PROB_FLOOR).ln();
        Ok(SoftDistribution { probs, log_probs, temperature })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn batch(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    /// Constant copy; used for teacher targets.
    pub fn detach(&self) -> SoftDistribution {
        SoftDistribution {
            probs: self.probs.detach(),
            log_probs: self.log_probs.detach(),
            temperature: self.temperature,
        }
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Balancing, temperature and penalty scalars of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_g: f64,
    pub alpha_p: f64,
    pub omega: f64,
    pub tau_g: f64,
    pub tau_p: f64,
    pub gp_lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha_g: 0.1, alpha_p: 0.3, omega: 0.1, tau_g: 1.0, tau_p: 1.0, gp_lambda: 10.0 }
    }
}

impl LossWeights {
    /// Coefficient of the cross-entropy term, `1 - alpha_p - alpha_g`.
    pub fn alpha_ce(&self) -> f64 {
        1.0 - self.alpha_p - self.alpha_g
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("weights.{key}"), format!("must lie in [0, 1], got {v}")))
            }
        };
        unit("alpha_g", self.alpha_g)?;
        unit("alpha_p", self.alpha_p)?;
        if self.alpha_g + self.alpha_p > 1.0 + 1e-12 {
            return Err(Error::config(
                "weights.alpha_p",
                format!("alpha_p + alpha_g = {} exceeds 1", self.alpha_p + self.alpha_g),
            ));
        }
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return Err(Error::config("weights.omega", format!("must be non-negative, got {}", self.omega)));
        }
        for (key, tau) in [("tau_g", self.tau_g), ("tau_p", self.tau_p)] {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(Error::config(format!("weights.{key}"), format!("must be positive, got {tau}")));
            }
        }
        if !(self.gp_lambda.is_finite() && self.gp_lambda >= 0.0) {
            return Err(Error::config("weights.gp_lambda", format!("must be non-negative, got {}", self.gp_lambda)));
        }
        Ok(())
    }
}

/// Temperature-softened softmax over classes, shift-stable.
pub fn soften(logits: &LogitsBatch, tau: f64) -> Result<SoftDistribution> {
    check_temperature(tau)?;
    let log_probs = logits.tensor().scale(1.0 / tau).log_softmax(1);
    let probs = log_probs.exp();
    Ok(SoftDistribution { probs, log_probs, temperature: tau })
}

/// Mean negative log-likelihood of the labels.
pub fn cross_entropy(labels: &HardLabels, probs: &SoftDistribution) -> Result<Tensor> {
    if labels.len() != probs.batch() || labels.num_classes() != probs.classes() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels over {} classes vs distribution {:?}",
            labels.len(),
            labels.num_classes(),
            probs.probs().shape()
        )));
    }
    let picked = probs.log_probs().mul(&Tensor::constant(labels.one_hot())).sum();
    Ok(picked.scale(-1.0 / labels.len() as f64))
}

/// `tau^2 * mean_b KL(teacher_b || student_b)`; the teacher is a constant.
pub fn kd_kl(teacher: &SoftDistribution, student: &SoftDistribution, tau: f64) -> Result<Tensor> {
    check_temperature(tau)?;
    let matches = |t: f64| (t - tau).abs() <= 1e-12 * tau.max(1.0);
    if !matches(teacher.temperature()) || !matches(student.temperature()) {
        return Err(Error::InvalidArgument(format!(
            "temperature mismatch: teacher {}, student {}, requested {tau}",
            teacher.temperature(),
            student.temperature()
        )));
    }
    if teacher.probs().shape() != student.probs().shape() {
        return Err(Error::ShapeMismatch(format!(
            "teacher {:?} vs student {:?}",
            teacher.probs().shape(),
            student.probs().shape()
        )));
    }
    let t = teacher.detach();
    let pointwise = t.probs().mul(&t.log_probs().sub(student.log_probs()));
    Ok(pointwise.sum().scale(tau * tau / student.batch() as f64))
}

fn softened_kd(teacher: &LogitsBatch, student: &LogitsBatch, tau: f64) -> Result<Tensor> {
    teacher.same_shape(student)?;
    let t = soften(&teacher.detach(), tau)?;
    let s = soften(student, tau)?;
    kd_kl(&t, &s, tau)
}

/// Distillation from the frozen superior model at temperature `tau_g`.
pub fn guide_loss(superior_logits: &LogitsBatch, student_logits: &LogitsBatch, tau_g: f64) -> Result<Tensor> {
    softened_kd(superior_logits, student_logits, tau_g)
}

/// Distillation from the previous-epoch snapshot at temperature `tau_p`.
pub fn progressive_loss(prev_logits: &LogitsBatch, student_logits: &LogitsBatch, tau_p: f64) -> Result<Tensor> {
    softened_kd(prev_logits, student_logits, tau_p)
}

/// Maps a `(B, C)` batch of logit vectors to `(B,)` realness scores.
///
/// For the gradient penalty the scores of different rows must not interact
/// (normalization layers in inference mode), and every operation must support
/// second-order gradients.
pub trait CriticFunction {
    fn scores(&self, logits: &Tensor) -> Result<Tensor>;
}

impl<F> CriticFunction for F
where
    F: Fn(&Tensor) -> Tensor,
{
    fn scores(&self, logits: &Tensor) -> Result<Tensor> {
        Ok(self(logits))
    }
}

fn critic_scores(critic: &dyn CriticFunction, x: &Tensor) -> Result<Tensor> {
    let b = x.shape()[0];
    let s = critic.scores(x)?;
    if s.len() != b {
        return Err(Error::ShapeMismatch(format!("critic returned {:?} for batch of {b}", s.shape())));
    }
    Ok(s.reshape(&[b]))
}

/// Fails unless the critic emits one score per row and can be differentiated
/// twice, as the gradient penalty requires.
pub fn ensure_twice_differentiable(critic: &dyn CriticFunction, classes: usize) -> Result<()> {
    let probe = Tensor::leaf(Array::from_shape_fn(IxDyn(&[2, classes]), |ix| 0.1 * (ix[0] + 2 * ix[1]) as f64));
    let s = critic_scores(critic, &probe)?;
    let g = grad(&s.sum(), &[&probe], true)?.remove(0);
    if g.requires_grad() {
        grad(&g.square().sum(), &[&probe], false)?;
    }
    Ok(())
}

/// `mean_b (||grad_x D(x_b)||_2 - 1)^2` at `x_b = e_b * sup_b + (1 - e_b) * stu_b`.
///
/// Differentiable with respect to the critic's parameters and to both logit
/// batches.
pub fn gradient_penalty(
    critic: &dyn CriticFunction,
    superior_logits: &LogitsBatch,
    student_logits: &LogitsBatch,
    epsilons: &[f64],
) -> Result<Tensor> {
    superior_logits.same_shape(student_logits)?;
    let b = student_logits.batch();
    if epsilons.len() != b {
        return Err(Error::ShapeMismatch(format!("{} epsilons for batch of {b}", epsilons.len())));
    }
    if let Some(e) = epsilons.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::InvalidArgument(format!("epsilon {e} outside [0, 1]")));
    }
    // The inner gradient needs a recorded graph even inside `no_grad`.
    let _recording = enable_grad();
    let eps = Tensor::constant(Array::from_shape_vec(IxDyn(&[b, 1]), epsilons.to_vec()).unwrap());
    let one_minus = Tensor::constant(Array::from_shape_vec(IxDyn(&[b, 1]), epsilons.iter().map(|e| 1.0 - e).collect()).unwrap());
    let mut mixed = superior_logits.tensor().mul(&eps).add(&student_logits.tensor().mul(&one_minus));
    if !mixed.requires_grad() {
        mixed = Tensor::leaf(mixed.value().clone());
    }
    let scores = critic_scores(critic, &mixed)?;
    let g = grad(&scores.sum(), &[&mixed], true)?.remove(0);
    let norms = g.square().sum_axes(&[1], false).add_scalar(GRAD_NORM_EPS).sqrt();
    Ok(norms.add_scalar(-1.0).square().mean())
}

/// Critic objective: mean student score, optionally minus mean superior
/// score, plus `gp_lambda * gp`.
pub fn critic_loss(
    scores_student: &Tensor,
    scores_superior: Option<&Tensor>,
    gp: &Tensor,
    weights: &LossWeights,
    include_superior_term: bool,
) -> Result<Tensor> {
    if !(weights.gp_lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("gp_lambda must be non-negative, got {}", weights.gp_lambda)));
    }
    if scores_student.is_empty() {
        return Err(Error::InvalidArgument("empty score batch".into()));
    }
    let mut loss = scores_student.mean();
    if include_superior_term {
        let sup = scores_superior
            .ok_or_else(|| Error::InvalidArgument("superior scores required when the superior term is included".into()))?;
        loss = loss.sub(&sup.mean());
    }
    Ok(loss.add(&gp.scale(weights.gp_lambda)))
}

/// `-mean(scores)` on student logits.
pub fn adversarial_loss(scores_student: &Tensor) -> Result<Tensor> {
    if scores_student.is_empty() {
        return Err(Error::InvalidArgument("empty score batch".into()));
    }
    Ok(scores_student.mean().neg())
}

/// `(1 - a_P - a_G) ce + a_P lp + a_G lg + w la`.
pub fn total_loss(ce: &Tensor, lp: &Tensor, lg: &Tensor, la: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    for (name, t) in [("ce", ce), ("lp", lp), ("lg", lg), ("la", la)] {
        if t.len() != 1 || !t.item().is_finite() {
            return Err(Error::InvalidArgument(format!("component {name} must be a finite scalar")));
        }
    }
    Ok(ce
        .scale(weights.alpha_ce())
        .add(&lp.scale(weights.alpha_p))
        .add(&lg.scale(weights.alpha_g))
        .add(&la.scale(weights.omega)))
}
