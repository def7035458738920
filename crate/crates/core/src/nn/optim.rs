//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use super::matrix::norm;
use crate::error::{Result, RlpoError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    /// Global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Sgd,
            learning_rate,
            clip_norm: None,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }
}

/// Adam moments; empty for SGD.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// What was actually applied, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub applied_norm: f64,
}

/// Apply one update in place. Refuses non-finite gradients without touching
/// `params` or `state`.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<StepInfo> {
    if params.len() != grads.len() {
        return Err(RlpoError::shape("gradient vector", params.len(), grads.len()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(RlpoError::NonFinite(format!("gradient entry {i}")));
    }
    let grad_norm = norm(grads);
    let factor = match config.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    let lr = config.learning_rate;
    match config.algorithm {
        Algorithm::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= lr * g * factor;
            }
        }
        Algorithm::Adam => {
            if state.m.len() != params.len() {
                state.m = vec![0.0; params.len()];
                state.v = vec![0.0; params.len()];
            }
            let (b1, b2) = (config.beta1, config.beta2);
            let t = state.step as i32 + 1;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for i in 0..params.len() {
                let g = grads[i] * factor;
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                let mhat = state.m[i] / c1;
                let vhat = state.v[i] / c2;
                params[i] -= lr * mhat / (vhat.sqrt() + config.epsilon);
            }
        }
    }
    state.step += 1;
    Ok(StepInfo {
        grad_norm,
        applied_norm: grad_norm * factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_arithmetic() {
        let mut p = [1.0];
        optimizer_step(&mut p, &[0.5], &mut OptimizerState::default(), &OptimizerConfig::sgd(0.1)).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn global_norm_clipping_caps_at_ten() {
        let mut p = [0.0, 0.0];
        let cfg = OptimizerConfig::sgd(1.0).with_clip(10.0);
        // norm 20
        let info = optimizer_step(&mut p, &[12.0, 16.0], &mut OptimizerState::default(), &cfg).unwrap();
        assert!((info.grad_norm - 20.0).abs() < 1e-12);
        assert!((info.applied_norm - 10.0).abs() < 1e-12);
        assert!((norm(&p) - 10.0).abs() < 1e-12);
        assert!((p[0] + 6.0).abs() < 1e-12 && (p[1] + 8.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_only_decays_adam_moments() {
        let cfg = OptimizerConfig::adam(0.01);
        let mut st = OptimizerState::default();
        let mut p = [1.0, -2.0];
        optimizer_step(&mut p, &[0.3, -0.1], &mut st, &cfg).unwrap();
        let (p_before, m_before) = (p, st.m.clone());
        optimizer_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        for (m2, m1) in st.m.iter().zip(&m_before) {
            assert!((m2 - 0.9 * m1).abs() < 1e-15);
        }
        // Adam keeps moving on momentum alone; the step is the decayed moment.
        assert_ne!(p, p_before);
        // From fresh state a zero gradient is an exact fixed point for both.
        let mut f = [1.5, -0.5];
        optimizer_step(&mut f, &[0.0, 0.0], &mut OptimizerState::default(), &cfg).unwrap();
        assert_eq!(f, [1.5, -0.5]);
        let mut q = [3.0];
        optimizer_step(&mut q, &[0.0], &mut OptimizerState::default(), &OptimizerConfig::sgd(1.0)).unwrap();
        assert_eq!(q, [3.0]);
    }

    #[test]
    fn non_finite_gradient_is_refused_without_side_effects() {
        let cfg = OptimizerConfig::adam(0.1);
        let mut st = OptimizerState::default();
        let mut p = [1.0, 2.0];
        optimizer_step(&mut p, &[0.1, 0.1], &mut st, &cfg).unwrap();
        let (p0, s0) = (p, st.clone());
        assert!(optimizer_step(&mut p, &[f64::NAN, 0.0], &mut st, &cfg).is_err());
        assert_eq!(p, p0);
        assert_eq!(st, s0);
    }

    #[test]
    fn deterministic() {
        let cfg = OptimizerConfig::adam(0.05).with_clip(1.0);
        let run = || {
            let mut p = vec![0.5, -0.25, 2.0];
            let mut st = OptimizerState::default();
            for k in 0..5 {
                let g: Vec<f64> = p.iter().map(|v| v * (k as f64 + 1.0)).collect();
                optimizer_step(&mut p, &g, &mut st, &cfg).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }
}
