//! Adam and the two validation-driven state machines.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-7 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, moments: HashMap::new() }
    }

    /// First and second moments of a parameter, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update of the named parameters.
///
/// Frozen parameters must not be passed; doing so is an error.
pub fn adam_step(params: &mut ParameterSet, grads: &[(String, Tensor)], state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
        if p.frozen {
            return Err(Error::InvalidArgument(format!("gradient supplied for frozen parameter `{name}`")));
        }
        if p.value.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{name}` is {:?}, gradient is {:?}", p.value.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, epsilon } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        let theta = params.get_mut(name).unwrap().value.data_mut();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
        for (((th, m), v), &g) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *th -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Early stopping on a loss-like monitor.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub since_improvement: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopState { patience, min_delta, best: f64::INFINITY, since_improvement: 0 }
    }

    /// Feeds one epoch's value; returns `true` when training should stop,
    /// i.e. once `patience` consecutive epochs failed to beat
    /// `best − min_delta`.
    pub fn update(&mut self, value: f64) -> bool {
        if value < self.best - self.min_delta {
            self.best = value;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        self.since_improvement >= self.patience
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new(5, 1e-4)
    }
}

/// Reduce-on-plateau learning-rate control.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauState {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
    pub best: f64,
    pub stagnant: usize,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        PlateauState {
            lr,
            factor: 0.5,
            patience: 3,
            min_lr: 1e-7,
            min_delta: 1e-4,
            best: f64::INFINITY,
            stagnant: 0,
        }
    }

    /// Feeds one epoch's value and returns the learning rate for the next.
    pub fn update(&mut self, value: f64) -> f64 {
        if value < self.best - self.min_delta {
            self.best = value;
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
            if self.stagnant >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stagnant = 0;
            }
        }
        self.lr
    }
}
