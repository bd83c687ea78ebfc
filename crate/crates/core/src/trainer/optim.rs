use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 100,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: i32,
}

/// Adam with bias correction. Moments are keyed by parameter name and reset
/// whenever a parameter changes shape or is explicitly forgotten.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            state: BTreeMap::new(),
        }
    }

    /// Drops the moments of every parameter whose name starts with `prefix`.
    pub fn forget(&mut self, prefix: &str) {
        self.state.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, _), grad) in params.iter().zip(grads) {
            if let Some(index) = grad.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "gradient",
                    param: name.clone(),
                    index,
                });
            }
        }
        for ((name, param), grad) in params.into_iter().zip(grads) {
            if param.shape() != grad.shape() {
                return Err(Error::shape("adam step", param.shape(), grad.shape()));
            }
            let shape = param.shape();
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: Tensor::zeros(shape.0, shape.1),
                v: Tensor::zeros(shape.0, shape.1),
                t: 0,
            });
            if st.m.shape() != shape {
                *st = Moments {
                    m: Tensor::zeros(shape.0, shape.1),
                    v: Tensor::zeros(shape.0, shape.1),
                    t: 0,
                };
            }
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t);
            let bc2 = 1.0 - self.beta2.powi(st.t);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> OptimConfig {
        OptimConfig {
            lr,
            ..Default::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(&cfg(0.1));
        let mut p = Tensor::scalar(1.0);
        adam.step(vec![("w".into(), &mut p)], &[Tensor::scalar(1.0)]).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr · 1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::new(&cfg(0.1));
        let mut p = Tensor::row_vector(&[0.3, -0.2]);
        let before = p.clone();
        adam.step(vec![("w".into(), &mut p)], &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn replay_is_identical() {
        let run = || {
            let mut adam = Adam::new(&cfg(0.05));
            let mut p = Tensor::row_vector(&[0.3, -0.2]);
            for g in [[1.0, -2.0], [0.5, 0.25]] {
                adam.step(vec![("w".into(), &mut p)], &[Tensor::row_vector(&g)]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut adam = Adam::new(&cfg(0.1));
        let mut p = Tensor::row_vector(&[0.0, 0.0]);
        let err = adam
            .step(vec![("head.weight".into(), &mut p)], &[Tensor::row_vector(&[0.0, f64::NAN])])
            .unwrap_err();
        assert!(err.to_string().contains("head.weight"));
        assert_eq!(p, Tensor::row_vector(&[0.0, 0.0]));
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(OptimConfig::default().validate().is_ok());
    }
}
