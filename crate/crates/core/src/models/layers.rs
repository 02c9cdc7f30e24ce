use aikd_autograd::{Array, Tensor};
use ndarray::{Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::params::{Forward, NormMode, ParamId, ParamKind, ParamStore};

pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const BN_EPS: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Array {
    let d = Uniform::new_inclusive(-bound, bound);
    Array::from_shape_simple_fn(IxDyn(shape), || d.sample(rng))
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Array {
    let d = Normal::new(0.0, std).expect("positive std");
    Array::from_shape_simple_fn(IxDyn(shape), || d.sample(rng))
}

/// Affine map `x W^T + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Weights and bias uniform on `±1/sqrt(in)`.
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), ParamKind::Trainable, uniform(rng, &[out, inp], bound));
        let bias = store.add(format!("{name}.bias"), ParamKind::Trainable, uniform(rng, &[out], bound));
        Linear { weight, bias, in_features: inp, out_features: out }
    }

    pub fn forward(&self, f: &Forward, x: &Tensor) -> Tensor {
        x.matmul(&f.param(self.weight).t()).add(&f.param(self.bias))
    }
}

/// Bias-free 2-D convolution, He-normal initialized on fan-out.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (out * kernel * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), ParamKind::Trainable, normal(rng, &[out, inp, kernel, kernel], std));
        Conv2d { weight, stride, pad }
    }

    pub fn forward(&self, f: &Forward, x: &Tensor) -> Tensor {
        x.conv2d(&f.param(self.weight), self.stride, self.pad)
    }
}

/// Batch normalization over the channel axis 1 of `(B, C)` or `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let v = |x: f64| Array::from_elem(IxDyn(&[channels]), x);
        BatchNorm {
            gamma: store.add(format!("{name}.weight"), ParamKind::Trainable, v(1.0)),
            beta: store.add(format!("{name}.bias"), ParamKind::Trainable, v(0.0)),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, v(0.0)),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, v(1.0)),
            channels,
        }
    }

    pub fn forward(&self, f: &Forward, x: &Tensor, mode: NormMode) -> Tensor {
        let nd = x.ndim();
        let mut bshape = vec![1; nd];
        bshape[1] = self.channels;
        let axes: Vec<usize> = (0..nd).filter(|&a| a != 1).collect();
        let gamma = f.param(self.gamma).reshape(&bshape);
        let beta = f.param(self.beta).reshape(&bshape);
        let normalized = match mode {
            NormMode::Train => {
                let mean = x.mean_axes(&axes, true);
                let centered = x.sub(&mean);
                let var = centered.square().mean_axes(&axes, true);
                let n = x.len() / self.channels;
                self.record_running(f, mean.value(), var.value(), n);
                centered.div(&var.add_scalar(BN_EPS).sqrt())
            }
            NormMode::Eval => {
                let store = f.store();
                let rm = store.value(self.running_mean).clone().into_shape_with_order(IxDyn(&bshape)).unwrap();
                let rv = store.value(self.running_var).mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let rv = rv.into_shape_with_order(IxDyn(&bshape)).unwrap();
                x.sub(&Tensor::constant(rm)).mul(&Tensor::constant(rv))
            }
        };
        normalized.mul(&gamma).add(&beta)
    }

    fn record_running(&self, f: &Forward, mean: &Array, var: &Array, n: usize) {
        let flat = |a: &Array| a.iter().copied().collect::<Vec<f64>>();
        let (mean, var) = (flat(mean), flat(var));
        let store = f.store();
        let m = BN_MOMENTUM;
        let rm = store.value(self.running_mean);
        let new_mean = Array::from_shape_fn(IxDyn(&[self.channels]), |ix| (1.0 - m) * rm[[ix[0]]] + m * mean[ix[0]]);
        f.record_update(self.running_mean, new_mean);
        if n > 1 {
            let unbias = n as f64 / (n - 1) as f64;
            let rv = store.value(self.running_var);
            let new_var = Array::from_shape_fn(IxDyn(&[self.channels]), |ix| (1.0 - m) * rv[[ix[0]]] + m * var[ix[0]] * unbias);
            f.record_update(self.running_var, new_var);
        }
    }
}

/// Spatial mean of `(B, C, H, W)` to `(B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    x.mean_axes(&[2, 3], false)
}

/// Index of the largest entry in each row, earliest index on ties.
pub fn argmax_rows(logits: &ndarray::Array2<f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
