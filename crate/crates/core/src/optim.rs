//! SGD and Adam over flat parameter vectors, with linear warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub warmup_steps: u64,
}

/// Learning rate at 1-based `step`: a linear ramp over `warmup_steps`, then
/// constant.
pub fn learning_rate_at(base: f64, warmup_steps: u64, step: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base
    } else {
        base * step as f64 / warmup_steps as f64
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, len: usize) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                config.learning_rate
            )));
        }
        let state = if config.kind == OptimizerKind::Adam { len } else { 0 };
        Ok(Self {
            config,
            step: 0,
            m: vec![0.0; state],
            v: vec![0.0; state],
        })
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        learning_rate_at(self.config.learning_rate, self.config.warmup_steps, self.step.max(1))
    }

    /// Applies one update in place. On a non-finite result the parameters
    /// are left untouched.
    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::LengthMismatch {
                what: "parameters vs gradient",
                left: params.len(),
                right: grad.len(),
            });
        }
        let t = self.step + 1;
        let lr = learning_rate_at(self.config.learning_rate, self.config.warmup_steps, t);
        let mut next = params.to_vec();
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in next.iter_mut().zip(grad) {
                    *p = (*p as f64 - lr * g as f64) as f32;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(Error::LengthMismatch {
                        what: "optimizer state vs parameters",
                        left: self.m.len(),
                        right: params.len(),
                    });
                }
                let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
                let mut m = self.m.clone();
                let mut v = self.v.clone();
                for i in 0..next.len() {
                    let g = grad[i] as f64;
                    let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * g;
                    let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
                    m[i] = mi as f32;
                    v[i] = vi as f32;
                    let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                    next[i] = (next[i] as f64 - update) as f32;
                }
                if let Some(i) = next.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteUpdate(i));
                }
                self.m = m;
                self.v = v;
            }
        }
        if let Some(i) = next.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteUpdate(i));
        }
        params.copy_from_slice(&next);
        self.step = t;
        Ok(())
    }
}
