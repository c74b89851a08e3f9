//! First-order optimizers. Every update skips frozen parameters and keeps
//! the padding row of embedding tables at its current value.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    /// Plain SGD; the rate halves every `halve_every` steps when set.
    Sgd {
        lr: f64,
        halve_every: Option<usize>,
    },
    Adagrad {
        lr: f64,
        initial_accumulator: f64,
    },
    AdaDelta {
        lr: f64,
        rho: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn build(self) -> Optimizer {
        Optimizer {
            config: self,
            steps: 0,
            slots: HashMap::new(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Sgd { .. } => "sgd",
            OptimizerConfig::Adagrad { .. } => "adagrad",
            OptimizerConfig::AdaDelta { .. } => "adadelta",
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. }
            | OptimizerConfig::Adagrad { lr, .. }
            | OptimizerConfig::AdaDelta { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgd { halve_every, .. } => OptimizerConfig::Sgd { lr, halve_every },
            OptimizerConfig::Adagrad {
                initial_accumulator, ..
            } => OptimizerConfig::Adagrad {
                lr,
                initial_accumulator,
            },
            OptimizerConfig::AdaDelta { rho, eps, .. } => OptimizerConfig::AdaDelta { lr, rho, eps },
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr, halve_every: None }
    }

    pub fn adagrad(lr: f64) -> Self {
        OptimizerConfig::Adagrad {
            lr,
            initial_accumulator: 0.1,
        }
    }

    pub fn adadelta(lr: f64) -> Self {
        OptimizerConfig::AdaDelta {
            lr,
            rho: 0.95,
            eps: 1e-6,
        }
    }
}

impl FromStr for OptimizerConfig {
    type Err = Error;

    /// Parses a name with default hyperparameters.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::sgd(0.5)),
            "adagrad" => Ok(Self::adagrad(0.15)),
            "adadelta" => Ok(Self::adadelta(1.0)),
            _ => Err(Error::Config(format!("unknown optimizer {s} (sgd|adagrad|adadelta)"))),
        }
    }
}

impl fmt::Display for OptimizerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Optimizer state: per-parameter accumulators keyed by name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: usize,
    slots: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Optimizer {
    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Learning rate in effect for the next step.
    pub fn current_lr(&self) -> f64 {
        match self.config {
            OptimizerConfig::Sgd {
                lr,
                halve_every: Some(k),
            } if k > 0 => lr * 0.5f64.powi((self.steps / k) as i32),
            c => c.lr(),
        }
    }

    /// Applies one update. Gradients for unknown names are an error;
    /// parameters without a gradient are left alone.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &IndexMap<String, Tensor>) -> Result<()> {
        let lr = self.current_lr() as f32;
        for (name, grad) in grads {
            let param = ps
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if param.frozen {
                continue;
            }
            if grad.len() != param.value.len() {
                return Err(Error::dim(
                    "optimizer",
                    format!(
                        "{name}: gradient {:?} vs parameter {:?}",
                        grad.shape(),
                        param.value.shape()
                    ),
                ));
            }
            // the padding row is the first `cols` entries
            let skip = if param.pad_row { param.value.cols() } else { 0 };
            let w = &mut param.value.data_mut()[skip..];
            let gr = &grad.data()[skip..];
            match self.config {
                OptimizerConfig::Sgd { .. } => {
                    for (w, &g) in w.iter_mut().zip(gr) {
                        *w -= lr * g;
                    }
                }
                OptimizerConfig::Adagrad {
                    initial_accumulator, ..
                } => {
                    let (acc, _) = self
                        .slots
                        .entry(name.clone())
                        .or_insert_with(|| (vec![initial_accumulator as f32; gr.len()], Vec::new()));
                    for ((w, &g), a) in w.iter_mut().zip(gr).zip(acc.iter_mut()) {
                        *a += g * g;
                        *w -= lr * g / a.sqrt();
                    }
                }
                OptimizerConfig::AdaDelta { rho, eps, .. } => {
                    let (rho, eps) = (rho as f32, eps as f32);
                    let (eg, ex) = self
                        .slots
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; gr.len()], vec![0.0; gr.len()]));
                    for (((w, &g), eg), ex) in w.iter_mut().zip(gr).zip(eg.iter_mut()).zip(ex.iter_mut()) {
                        *eg = rho * *eg + (1.0 - rho) * g * g;
                        let dx = -((*ex + eps).sqrt() / (*eg + eps).sqrt()) * g;
                        *ex = rho * *ex + (1.0 - rho) * dx * dx;
                        *w += lr * dx;
                    }
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut IndexMap<String, Tensor>, max: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > max && norm > 0.0 {
        let k = (max / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}
