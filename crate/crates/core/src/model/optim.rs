//! SGD with momentum, weight decay, and a milestone learning-rate schedule.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{MatError, Result};
use crate::model::Classifier;

/// Optimizer hyper-parameters plus per-parameter momentum buffers.
///
/// The effective learning rate at a given epoch is the initial rate times
/// `decay_factor` raised to the number of milestones already passed, so it is
/// non-increasing across epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    #[serde(skip)]
    velocity: Option<Vec<ArrayD<f64>>>,
}

impl OptimState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(MatError::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(MatError::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if weight_decay < 0.0 {
            return Err(MatError::Config(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(OptimState {
            learning_rate,
            momentum,
            weight_decay,
            milestones: Vec::new(),
            decay_factor: 1.0,
            velocity: None,
        })
    }

    pub fn with_milestones(mut self, milestones: Vec<usize>, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(MatError::Config(format!(
                "decay factor must be in (0, 1], got {factor}"
            )));
        }
        self.milestones = milestones;
        self.decay_factor = factor;
        Ok(self)
    }

    /// Effective learning rate at `epoch` (1-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }

    /// Momentum buffers, if any step has run yet.
    pub fn velocity(&self) -> Option<&Vec<ArrayD<f64>>> {
        self.velocity.as_ref()
    }

    pub fn set_velocity(&mut self, velocity: Option<Vec<ArrayD<f64>>>) {
        self.velocity = velocity;
    }

    /// Drop momentum buffers (fresh optimizer for a new network).
    pub fn reset(&mut self) {
        self.velocity = None;
    }
}

/// One SGD update: `g' = g + wd * theta`, `v = momentum * v + g'`,
/// `theta -= lr_at_epoch(epoch) * v`.
///
/// Refuses the step without touching parameters when any gradient entry is
/// non-finite.
pub fn sgd_step(
    model: &mut Classifier,
    optim: &mut OptimState,
    grads: &[ArrayD<f64>],
    epoch: usize,
) -> Result<()> {
    for g in grads {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(MatError::Numeric(
                "non-finite gradient; update refused".to_string(),
            ));
        }
    }
    let lr = optim.lr_at_epoch(epoch);
    let momentum = optim.momentum;
    let wd = optim.weight_decay;

    let mut params = model.param_slices_mut();
    if params.len() != grads.len() {
        return Err(MatError::shape(
            "sgd step",
            format!("{} gradient arrays", params.len()),
            format!("{}", grads.len()),
        ));
    }
    let velocity = optim
        .velocity
        .get_or_insert_with(|| grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect());
    if velocity.len() != grads.len() {
        return Err(MatError::shape(
            "sgd step",
            format!("{} velocity arrays", grads.len()),
            format!("{}", velocity.len()),
        ));
    }

    for ((theta, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g
            .as_slice()
            .ok_or_else(|| MatError::Numeric("non-contiguous gradient array".into()))?;
        if g.len() != theta.len() {
            return Err(MatError::shape(
                "sgd step",
                format!("{} entries", theta.len()),
                format!("{}", g.len()),
            ));
        }
        let v = v.as_slice_mut().expect("velocity allocated contiguously");
        for i in 0..theta.len() {
            let adjusted = g[i] + wd * theta[i];
            v[i] = momentum * v[i] + adjusted;
            theta[i] -= lr * v[i];
        }
    }
    Ok(())
}
