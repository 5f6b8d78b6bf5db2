//! Per-parameter adaptive optimisers and global-norm gradient clipping.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adadelta { rho: f64, eps: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub const ADADELTA: Self = OptimizerConfig::Adadelta { rho: 0.9, eps: 1e-6 };
    pub const ADAM: Self = OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };

    /// Peak step size that suits this optimizer under the warmup-cosine schedule.
    pub fn default_lr(&self) -> f64 {
        match self {
            OptimizerConfig::Adadelta { .. } => 1.0,
            OptimizerConfig::Adam { .. } => 2e-3,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::ADAM
    }
}

struct Slot {
    var: Var,
    a: Tensor,
    b: Tensor,
}

pub struct Optimizer {
    config: OptimizerConfig,
    slots: Vec<Slot>,
    steps: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, vars: &[Var]) -> Result<Self> {
        let slots = vars
            .iter()
            .map(|v| {
                Ok(Slot {
                    var: v.clone(),
                    a: v.as_tensor().zeros_like()?,
                    b: v.as_tensor().zeros_like()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, slots, steps: 0 })
    }

    /// Applies one update with learning-rate multiplier `lr`; parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64, clip_scale: f64) -> Result<()> {
        self.steps += 1;
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else { continue };
            // Gradients may carry graph history; keep optimizer state free of it.
            let g = (g.detach() * clip_scale)?;
            match self.config {
                OptimizerConfig::Adadelta { rho, eps } => {
                    s.a = ((&s.a * rho)? + (g.sqr()? * (1.0 - rho))?)?.detach();
                    let delta = (((&s.b + eps)?.sqrt()? / (&s.a + eps)?.sqrt()?)? * &g)?;
                    s.b = ((&s.b * rho)? + (delta.sqr()? * (1.0 - rho))?)?.detach();
                    s.var.set(&(s.var.as_tensor() - (delta * lr)?)?)?;
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    s.a = ((&s.a * beta1)? + (&g * (1.0 - beta1))?)?.detach();
                    s.b = ((&s.b * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
                    let m = (&s.a / (1.0 - beta1.powi(self.steps)))?;
                    let v = (&s.b / (1.0 - beta2.powi(self.steps)))?;
                    let update = (m / (v.sqrt()? + eps)?)?;
                    s.var.set(&(s.var.as_tensor() - (update * lr)?)?)?;
                }
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all available gradients.
pub fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// Factor that rescales gradients to a global norm of at most `max_norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm { max_norm / norm } else { 1.0 }
}
