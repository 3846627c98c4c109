//! Parameter update rules and the learning-rate schedule.

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    RmsProp { rho: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn rmsprop() -> Self {
        Optimizer::RmsProp { rho: 0.99, eps: 1e-8 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Adam { .. } => "adam",
            Optimizer::RmsProp { .. } => "rmsprop",
        }
    }

    /// One update of `params` in place. `step` is 1-based (the step being taken).
    /// `weight_decay` adds `decay * theta` to the gradient.
    pub fn update(
        &self,
        params: &mut [f64],
        grads: &[f64],
        moments: &mut Moments,
        lr: f64,
        step: u64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != grads.len()
            || moments.first.len() != params.len()
            || moments.second.len() != params.len()
        {
            contract!(
                "optimizer shapes disagree: {} params, {} grads, {}/{} moments",
                params.len(),
                grads.len(),
                moments.first.len(),
                moments.second.len()
            );
        }
        if step == 0 {
            contract!("optimizer steps are 1-based");
        }
        match *self {
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(step as i32);
                let c2 = 1.0 - beta2.powi(step as i32);
                for i in 0..params.len() {
                    let g = grads[i] + weight_decay * params[i];
                    let m = &mut moments.first[i];
                    let v = &mut moments.second[i];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    params[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
            Optimizer::RmsProp { rho, eps } => {
                for i in 0..params.len() {
                    let g = grads[i] + weight_decay * params[i];
                    let v = &mut moments.second[i];
                    *v = rho * *v + (1.0 - rho) * g * g;
                    params[i] -= lr * g / (v.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// First and second moment buffers for one parameter slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }
}

/// Step-wise schedule: `lr(epoch) = initial * prod(multipliers of drops at or before epoch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    initial: f64,
    drops: Vec<(usize, f64)>,
}

impl Schedule {
    pub fn new(initial: f64, drops: Vec<(usize, f64)>) -> Result<Self> {
        if !(initial.is_finite() && initial >= 0.0) {
            contract!("initial learning rate must be finite and non-negative, got {initial}");
        }
        if drops.windows(2).any(|w| w[0].0 >= w[1].0) {
            contract!("learning-rate drop epochs must be strictly increasing: {drops:?}");
        }
        if let Some((e, m)) = drops.iter().find(|(_, m)| !(*m > 0.0 && *m <= 1.0)) {
            contract!("drop multiplier {m} at epoch {e} outside (0, 1]");
        }
        Ok(Self { initial, drops })
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            drops: Vec::new(),
        }
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    pub fn drops(&self) -> &[(usize, f64)] {
        &self.drops
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.drops
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.initial, |lr, (_, m)| lr * m)
    }

    /// Rate for the given 0-based step.
    pub fn lr_at_step(&self, step: u64, steps_per_epoch: u64) -> f64 {
        self.lr_at_epoch((step / steps_per_epoch.max(1)) as usize)
    }
}
