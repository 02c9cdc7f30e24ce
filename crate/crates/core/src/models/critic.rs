use aikd_autograd::{Array, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Linear};
use super::params::{Forward, NormMode, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::losses::CriticFunction;
use crate::util::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticSpec {
    pub input_dim: usize,
    #[serde(default = "default_hidden1")]
    pub hidden1: usize,
    #[serde(default = "default_hidden2")]
    pub hidden2: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_hidden1() -> usize {
    64
}
fn default_hidden2() -> usize {
    32
}
fn default_slope() -> f64 {
    0.2
}

impl CriticSpec {
    pub fn new(input_dim: usize) -> Self {
        CriticSpec { input_dim, hidden1: default_hidden1(), hidden2: default_hidden2(), leaky_slope: default_slope() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(Error::InvalidArgument(format!("invalid critic widths {self:?}")));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope > 0.0) {
            return Err(Error::InvalidArgument(format!("leaky slope must be positive, got {}", self.leaky_slope)));
        }
        Ok(())
    }

    /// Trainable scalars: two feature layers, normalization scale and shift,
    /// and the scalar projection.
    pub fn parameter_count(&self) -> usize {
        let (c, h1, h2) = (self.input_dim, self.hidden1, self.hidden2);
        c * h1 + h1 + 2 * h1 + h1 * h2 + h2 + h2 + 1
    }
}

/// Scores logit vectors: linear, batch norm, leaky ReLU, linear, linear to one
/// output.
#[derive(Debug, Clone)]
pub struct Critic {
    spec: CriticSpec,
    store: ParamStore,
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
    head: Linear,
}

impl Critic {
    pub fn build(spec: CriticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(seed, Stream::Critic, &[]);
        let mut store = ParamStore::new();
        let fc1 = Linear::new(&mut store, "fc1", spec.input_dim, spec.hidden1, &mut rng);
        let bn = BatchNorm::new(&mut store, "bn1", spec.hidden1);
        let fc2 = Linear::new(&mut store, "fc2", spec.hidden1, spec.hidden2, &mut rng);
        let head = Linear::new(&mut store, "head", spec.hidden2, 1, &mut rng);
        Ok(Critic { spec, store, fc1, bn, fc2, head })
    }

    pub fn spec(&self) -> &CriticSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Weight shapes of the two feature layers, `(out, in)`.
    pub fn layer_shapes(&self) -> [Vec<usize>; 3] {
        [
            self.store.value(self.fc1.weight).shape().to_vec(),
            self.store.value(self.fc2.weight).shape().to_vec(),
            self.store.value(self.head.weight).shape().to_vec(),
        ]
    }

    pub fn context(&self, track: bool) -> Forward<'_> {
        Forward::new(&self.store, track)
    }

    /// `(B, C)` logits to `(B,)` scores.
    pub fn scores(&self, f: &Forward, logits: &Tensor, mode: NormMode) -> Result<Tensor> {
        if logits.ndim() != 2 || logits.shape()[1] != self.spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "critic expects (B, {}), got {:?}",
                self.spec.input_dim,
                logits.shape()
            )));
        }
        let b = logits.shape()[0];
        let h = self.fc1.forward(f, logits);
        let h = self.bn.forward(f, &h, mode).leaky_relu(self.spec.leaky_slope);
        let h = self.fc2.forward(f, &h);
        Ok(self.head.forward(f, &h).reshape(&[b]))
    }

    /// Inference-statistics view for gradient-penalty evaluation; parameters
    /// are taken from `f`, so gradients reach them when `f` tracks.
    pub fn penalty_view<'a>(&'a self, f: &'a Forward<'a>) -> PenaltyView<'a> {
        PenaltyView { critic: self, forward: f }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Array)>) {
        self.store.apply_buffer_updates(updates);
    }
}

pub struct PenaltyView<'a> {
    critic: &'a Critic,
    forward: &'a Forward<'a>,
}

impl CriticFunction for PenaltyView<'_> {
    fn scores(&self, logits: &Tensor) -> Result<Tensor> {
        self.critic.scores(self.forward, logits, NormMode::Eval)
    }
}
