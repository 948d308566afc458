//! Adam and plain gradient descent over a [`ParamStore`].

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        Ok(())
    }
}

/// Moment estimates, one buffer per parameter tensor. Empty for SGD.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let state = match config.kind {
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| alloc::vec![0.0; t.numel()]).collect();
                OptimizerState {
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
            OptimizerKind::Sgd => OptimizerState::default(),
        };
        Ok(Optimizer { config, state })
    }

    /// Rebuilds an optimizer from saved state, checking buffer sizes.
    pub fn from_state(config: OptimizerConfig, state: OptimizerState, store: &ParamStore) -> Result<Self> {
        let fresh = Self::new(config, store)?;
        let same =
            |a: &[Vec<f64>], b: &[Vec<f64>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&fresh.state.m, &state.m) || !same(&fresh.state.v, &state.v) {
            return Err(Error::invalid("optimizer state does not match the parameters"));
        }
        Ok(Optimizer {
            config: fresh.config,
            state,
        })
    }

    /// Applies one update; `grads[i]` matches `store.tensors()[i]`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        let c = &self.config;
        self.state.step += 1;
        match c.kind {
            OptimizerKind::Sgd => {
                for (t, g) in store.tensors_mut().iter_mut().zip(grads) {
                    for (p, g) in t.data_mut().iter_mut().zip(g) {
                        *p -= c.learning_rate * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let n = self.state.step as f64;
                let bc1 = 1.0 - libm::pow(c.beta1, n);
                let bc2 = 1.0 - libm::pow(c.beta2, n);
                let tensors = store.tensors_mut().iter_mut();
                for (((t, g), m), v) in tensors.zip(grads).zip(&mut self.state.m).zip(&mut self.state.v) {
                    for (((p, &g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= c.learning_rate * m_hat / (libm::sqrt(v_hat) + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn store(x: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(x.to_vec()));
        s
    }

    #[test]
    fn sgd_step() {
        let mut s = store(&[1.0, -2.0]);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.5,
            ..OptimizerConfig::default()
        };
        let mut o = Optimizer::new(cfg, &s).unwrap();
        o.step(&mut s, &[vec![2.0, -4.0]]).unwrap();
        assert_eq!(s.tensors()[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // Bias correction makes the first step lr * g / (|g| + eps).
        let mut s = store(&[0.0, 0.0]);
        let mut o = Optimizer::new(OptimizerConfig::default(), &s).unwrap();
        o.step(&mut s, &[vec![3.0, -0.5]]).unwrap();
        let d = s.tensors()[0].data();
        assert!((d[0] + 1e-3).abs() < 1e-10);
        assert!((d[1] - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = store(&[3.0, -2.0]);
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            ..OptimizerConfig::default()
        };
        let mut o = Optimizer::new(cfg, &s).unwrap();
        for _ in 0..2000 {
            let g: Vec<f64> = s.tensors()[0].data().iter().map(|x| 2.0 * x).collect();
            o.step(&mut s, &[g]).unwrap();
        }
        assert!(s.tensors()[0].data().iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn state_shape_checked() {
        let s = store(&[1.0]);
        let bad = OptimizerState {
            step: 1,
            m: vec![vec![0.0; 2]],
            v: vec![vec![0.0; 2]],
        };
        assert!(Optimizer::from_state(OptimizerConfig::default(), bad, &s).is_err());
        assert!(OptimizerConfig {
            learning_rate: 0.0,
            ..OptimizerConfig::default()
        }
        .validate()
        .is_err());
    }
}
