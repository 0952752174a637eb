//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::{Gradients, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

/// One Adam update of a flat parameter array at step `t` (1-based).
pub fn update_slice<T: Scalar>(param: &mut [T], grad: &[T], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i].to_f64_lossy();
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        let p = param[i].to_f64_lossy() - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        param[i] = T::from_f64_lossy(p);
    }
}

impl AdamState {
    pub fn new<T: Scalar>(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = |p: &ParamSet<T>| -> Vec<Vec<f64>> {
            p.entries()
                .iter()
                .map(|e| {
                    if e.kind.trainable() {
                        vec![0.0; e.data.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(params),
            second: zeros(params),
        }
    }

    /// Applies one update in place and advances the step counter.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(NnError::Shape("gradients/optimizer do not match parameters".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            let trainable = params.entries()[i].kind.trainable();
            match g {
                Some(g) if trainable && g.len() == params.data(i).len() => {}
                None if !trainable => {}
                _ => {
                    return Err(NnError::Shape(format!(
                        "gradient for {} has the wrong shape",
                        params.entries()[i].name
                    )))
                }
            }
        }
        self.step += 1;
        let cfg = self.config;
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                update_slice(
                    params.data_mut(i),
                    g,
                    &mut self.first[i],
                    &mut self.second[i],
                    self.step,
                    &cfg,
                );
            }
        }
        Ok(())
    }
}
