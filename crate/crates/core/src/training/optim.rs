use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::autograd::Gradients;
use crate::tensor::DenseTensor;

fn momentum() -> f64 {
    0.9
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// `v ← μ·v + g`, `θ ← θ − lr·v`.
    Sgd {
        lr: f64,
        #[serde(default = "momentum")]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd {
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(mut self, new: f64) -> Self {
        match &mut self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr = new,
        }
        self
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => {
                lr.is_finite() && lr >= 0.0 && (0.0..1.0).contains(&momentum)
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                lr.is_finite()
                    && lr >= 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(TrainingError::Config(format!("optimizer settings out of range: {self:?}")))
        }
    }

    fn moments(&self) -> usize {
        match self {
            OptimizerConfig::Sgd { .. } => 1,
            OptimizerConfig::Adam { .. } => 2,
        }
    }
}

/// Per-parameter moment buffers: `moments[m][p]` is moment `m` of
/// parameter `p` (SGD keeps one, Adam two).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: Vec<Vec<DenseTensor>>,
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, params: &[&DenseTensor]) -> Self {
        let zeros: Vec<DenseTensor> = params.iter().map(|p| DenseTensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            moments: vec![zeros; config.moments()],
        }
    }

    pub fn check(&self, config: &OptimizerConfig, params: &[&DenseTensor]) -> Result<(), TrainingError> {
        let fits = self.moments.len() == config.moments()
            && self.moments.iter().all(|m| {
                m.len() == params.len() && m.iter().zip(params).all(|(a, b)| a.shape() == b.shape())
            });
        if fits {
            Ok(())
        } else {
            Err(TrainingError::Config("optimizer state does not match the parameters".into()))
        }
    }

    /// One update of every parameter. `grads` is indexed by parameter id.
    pub fn update(
        &mut self,
        config: &OptimizerConfig,
        params: Vec<&mut DenseTensor>,
        grads: &Gradients,
    ) -> Result<(), TrainingError> {
        self.step += 1;
        for (id, p) in params.into_iter().enumerate() {
            let g = grads
                .get(id)
                .ok_or_else(|| TrainingError::Config(format!("no gradient for parameter {id}")))?;
            match *config {
                OptimizerConfig::Sgd { lr, momentum } => {
                    let v = &mut self.moments[0][id];
                    for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let t = self.step as i32;
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let (first, second) = self.moments.split_at_mut(1);
                    let (m, v) = (&mut first[0][id], &mut second[0][id]);
                    for (((pv, mv), vv), gv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
