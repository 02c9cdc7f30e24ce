//! SGD with Nesterov momentum, Adam, and the multi-step learning-rate schedule.

use std::collections::BTreeMap;

use aikd_autograd::Array;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{NamedArray, ParamId, ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.1, momentum: 0.9, nesterov: true, weight_decay: 5e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// `base * gamma^k` where `k` counts milestones at or below `epoch`.
pub fn multistep_lr(base: f64, milestones: &[usize], gamma: f64, epoch: usize) -> f64 {
    let k = milestones.iter().filter(|&&m| m <= epoch).count();
    base * gamma.powi(k as i32)
}

/// Serializable optimizer slots keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub slots: Vec<NamedArray>,
}

fn slots_to_state(step: u64, slots: &BTreeMap<String, Array>) -> OptimState {
    OptimState {
        step,
        slots: slots.iter().map(|(k, v)| NamedArray::new(k, ParamKind::Buffer, v)).collect(),
    }
}

fn state_to_slots(state: &OptimState) -> Result<BTreeMap<String, Array>> {
    state.slots.iter().map(|n| Ok((n.name.clone(), n.to_array()?))).collect()
}

fn check_grad(store: &ParamStore, id: ParamId, g: &Array) -> Result<()> {
    if store.kind(id) != ParamKind::Trainable {
        return Err(Error::InvalidArgument(format!("{} is not trainable", store.name(id))));
    }
    if g.shape() != store.value(id).shape() {
        return Err(Error::ShapeMismatch(format!("gradient for {} has shape {:?}", store.name(id), g.shape())));
    }
    Ok(())
}

/// Stochastic gradient descent with the update rule
/// `d = g + wd p; v = mu v + d; p -= lr (d + mu v)` (Nesterov) or `p -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    step: u64,
    velocity: BTreeMap<String, Array>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd { config, step: 0, velocity: BTreeMap::new() }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Applies one update at learning rate `lr` to the parameters in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array)], lr: f64) -> Result<()> {
        let SgdConfig { momentum, nesterov, weight_decay, .. } = self.config;
        for (id, g) in grads {
            check_grad(store, *id, g)?;
            let name = store.name(*id).to_string();
            let p = store.value_mut(*id);
            let mut d = g.clone();
            if weight_decay != 0.0 {
                d.scaled_add(weight_decay, p);
            }
            if momentum != 0.0 {
                let v = self
                    .velocity
                    .entry(name)
                    .and_modify(|v| {
                        v.mapv_inplace(|x| x * momentum);
                        *v += &d;
                    })
                    .or_insert_with(|| d.clone());
                if nesterov {
                    d.scaled_add(momentum, v);
                } else {
                    d.assign(v);
                }
            }
            p.scaled_add(-lr, &d);
        }
        self.step += 1;
        Ok(())
    }

    pub fn state(&self) -> OptimState {
        slots_to_state(self.step, &self.velocity)
    }

    pub fn load_state(&mut self, state: &OptimState) -> Result<()> {
        self.velocity = state_to_slots(state)?;
        self.step = state.step;
        Ok(())
    }
}

/// Adam with bias correction; first and second moments per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Array>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array)]) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in grads {
            check_grad(store, *id, g)?;
            let name = store.name(*id).to_string();
            let m = self.moments.entry(format!("{name}.m")).or_insert_with(|| Array::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            let m = m.clone();
            let v = self.moments.entry(format!("{name}.v")).or_insert_with(|| Array::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let p = store.value_mut(*id);
            ndarray::Zip::from(p).and(&m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }

    pub fn state(&self) -> OptimState {
        slots_to_state(self.step, &self.moments)
    }

    pub fn load_state(&mut self, state: &OptimState) -> Result<()> {
        self.moments = state_to_slots(state)?;
        self.step = state.step;
        Ok(())
    }
}
