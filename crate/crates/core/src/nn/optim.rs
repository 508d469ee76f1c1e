//! SGD with momentum and weight decay, plus multiplicative step schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::Param;

/// SGD state: one velocity buffer per parameter.
///
/// Update rule per step:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, params: &[Param]) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} must be in [0, 1)")));
        }
        if weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay {weight_decay} must be non-negative"
            )));
        }
        Ok(OptimizerState {
            lr,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        })
    }

    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        assert_eq!(params.len(), self.velocity.len());
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            for i in 0..p.data.len() {
                v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * p.data[i];
                p.data[i] -= self.lr * v[i];
            }
        }
        Ok(())
    }
}

/// Multiplicative learning-rate decay at fixed epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    /// `(epoch, factor)`, strictly increasing epochs, factors in (0, 1].
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(initial: f64, milestones: Vec<(usize, f64)>) -> Result<Self> {
        let s = LrSchedule { initial, milestones };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0) {
            return Err(Error::Config(format!(
                "initial learning rate {} must be positive",
                self.initial
            )));
        }
        let mut prev: Option<usize> = None;
        for &(epoch, factor) in &self.milestones {
            if let Some(p) = prev {
                if epoch <= p {
                    return Err(Error::Config(format!(
                        "milestone epochs must be strictly increasing (saw {p} then {epoch})"
                    )));
                }
            }
            if !(factor > 0.0 && factor <= 1.0) {
                return Err(Error::Config(format!(
                    "milestone factor {factor} must be in (0, 1]"
                )));
            }
            prev = Some(epoch);
        }
        Ok(())
    }

    /// Initial rate times every factor whose milestone epoch has passed.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let mut lr = self.initial;
        for &(e, f) in &self.milestones {
            if e <= epoch {
                lr *= f;
            }
        }
        lr
    }
}
