//! Classifiers in their three roles, the logit critic, and checkpoints.

mod arch;
mod checkpoint;
mod critic;
mod layers;
mod params;

use aikd_autograd::{no_grad, Tensor};
use ndarray::{s, Array2, Array4, ArrayView4, Axis};

pub use arch::{Architecture, ClassifierSpec, Network, CANONICAL_RESOLUTIONS, INPUT_CHANNELS, TINY_MIN_RESOLUTION};
pub use checkpoint::{load_superior, Checkpoint, HeldoutRecord, ResumeState, CHECKPOINT_FORMAT};
pub use critic::{Critic, CriticSpec, PenaltyView};
pub use layers::{argmax_rows, BatchNorm, Conv2d, Linear};
pub use params::{Forward, NamedArray, NormMode, ParamId, ParamKind, ParamStore};

use crate::error::{Error, Result};
use crate::util::{stream, Stream};

/// Batch size used when a whole split is pushed through a frozen model.
pub const INFERENCE_BATCH: usize = 256;

/// A network together with its parameters.
///
/// A frozen classifier never hands out trainable leaves and always runs its
/// normalization layers on running statistics.
#[derive(Debug, Clone)]
pub struct Classifier {
    spec: ClassifierSpec,
    store: ParamStore,
    net: Network,
    frozen: bool,
}

impl Classifier {
    /// Seed-deterministic initialization.
    pub fn build(spec: ClassifierSpec, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::Init, &[]);
        let mut store = ParamStore::new();
        let net = Network::build(&spec, &mut store, &mut rng)?;
        Ok(Classifier { spec, store, net, frozen: false })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Mutable parameters; refused for frozen models.
    pub fn store_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::InvalidArgument("frozen classifier cannot be modified".into()));
        }
        Ok(&mut self.store)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Trainable copy with the same parameters.
    pub fn unfrozen(&self) -> Classifier {
        Classifier { frozen: false, ..self.clone() }
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Width of the final layer.
    pub fn output_width(&self) -> usize {
        self.net.classifier().out_features
    }

    pub fn context(&self, track: bool) -> Forward<'_> {
        Forward::new(&self.store, track && !self.frozen)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.spec.input_resolution;
        if shape.len() != 4 || shape[1] != INPUT_CHANNELS || shape[2] != r || shape[3] != r {
            return Err(Error::ShapeMismatch(format!(
                "expected (B, {INPUT_CHANNELS}, {r}, {r}) images, got {shape:?}"
            )));
        }
        if shape[0] == 0 {
            return Err(Error::ShapeMismatch("empty image batch".into()));
        }
        Ok(())
    }

    /// Logits for normalized images.
    pub fn forward(&self, f: &Forward, images: &Tensor, mode: NormMode) -> Result<Tensor> {
        self.check_input(images.shape())?;
        let mode = if self.frozen { NormMode::Eval } else { mode };
        Ok(self.net.forward(f, images, mode))
    }

    /// Inference-mode logits for a whole image array, processed in chunks.
    pub fn predict(&self, images: ArrayView4<f64>) -> Result<Array2<f64>> {
        self.check_input(images.shape())?;
        let _guard = no_grad();
        let f = Forward::new(&self.store, false);
        let n = images.shape()[0];
        let mut out = Array2::zeros((n, self.spec.num_classes));
        let mut start = 0;
        while start < n {
            let end = (start + INFERENCE_BATCH).min(n);
            let chunk = Tensor::constant(images.slice(s![start..end, .., .., ..]).to_owned().into_dyn());
            let logits = self.net.forward(&f, &chunk, NormMode::Eval);
            let logits = logits.value().view().into_dimensionality::<ndarray::Ix2>().expect("logits are 2-D");
            out.slice_mut(s![start..end, ..]).assign(&logits);
            start = end;
        }
        Ok(out)
    }

    /// Copies every parameter and buffer from `other`.
    pub fn copy_params_from(&mut self, other: &Classifier) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::SpecMismatch(format!("{:?} vs {:?}", self.spec, other.spec)));
        }
        self.store.copy_from(&other.store)
    }

    /// Multiplies the final layer's weights and bias by `factor`, so every
    /// logit is scaled by `factor`.
    pub fn scale_logits(&mut self, factor: f64) -> Result<()> {
        let fc = self.net.classifier().clone();
        let store = self.store_mut()?;
        store.value_mut(fc.weight).mapv_inplace(|w| w * factor);
        store.value_mut(fc.bias).mapv_inplace(|b| b * factor);
        Ok(())
    }

    pub(crate) fn store_unchecked_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let preds = argmax_rows(logits);
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Student, optional frozen superior, and frozen previous-epoch snapshot.
#[derive(Debug, Clone)]
pub struct ModelTriple {
    pub student: Classifier,
    pub superior: Option<Classifier>,
    pub previous: Classifier,
}

impl ModelTriple {
    /// Starts with the previous snapshot equal to the student.
    pub fn new(student: Classifier, superior: Option<Classifier>) -> Result<Self> {
        if let Some(sup) = &superior {
            if sup.spec() != student.spec() {
                return Err(Error::SpecMismatch(format!("superior {:?} vs student {:?}", sup.spec(), student.spec())));
            }
        }
        let superior = superior.map(|mut s| {
            s.freeze();
            s
        });
        let mut previous = student.clone();
        previous.freeze();
        Ok(ModelTriple { student, superior, previous })
    }

    /// Overwrites the previous snapshot with the student's current parameters.
    pub fn snapshot_previous(&mut self) {
        self.previous.store_unchecked_mut().copy_from(&self.student.store).expect("triple members share a spec");
    }
}

/// Splits `(N, ...)` rows into an owned batch selected by `indices`.
pub fn gather_images(images: &Array4<f64>, indices: &[usize]) -> Array4<f64> {
    images.select(Axis(0), indices)
}
