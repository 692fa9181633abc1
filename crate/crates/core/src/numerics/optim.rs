use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Step counter plus Adam moment accumulators shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<P: Parameters + ?Sized>(config: OptimizerConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        let alloc = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let (first, second) = match config.kind {
            OptimizerKind::Adam => (alloc(), alloc()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }
}

/// Applies one update of the configured optimizer in place.
pub fn optimizer_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState,
) -> Result<()> {
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    if grads.len() != params.len() {
        return Err(Error::shape("optimizer tensors", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape(
                format!("optimizer tensor {i}"),
                p.len(),
                g.len(),
            ));
        }
    }
    let cfg = state.config;
    state.step += 1;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(&grads) {
                for (pi, gi) in p.iter_mut().zip(g.iter()) {
                    *pi -= cfg.learning_rate * gi;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.first.len() != params.len()
                || state
                    .first
                    .iter()
                    .zip(&params)
                    .any(|(m, p)| m.len() != p.len())
            {
                return Err(Error::shape(
                    "Adam accumulators",
                    "accumulators shaped like parameters",
                    "a different parameter layout",
                ));
            }
            let t = state.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            for (((p, g), m), v) in params
                .iter_mut()
                .zip(&grads)
                .zip(state.first.iter_mut())
                .zip(state.second.iter_mut())
            {
                for (((pi, &gi), mi), vi) in p
                    .iter_mut()
                    .zip(g.iter())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                    *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *pi -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                }
            }
        }
    }
    Ok(())
}
