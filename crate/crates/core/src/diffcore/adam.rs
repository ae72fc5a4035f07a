use serde::{Deserialize, Serialize};

use super::{Gradients, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with moment buffers mirroring the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// Apply one update in place. A non-finite gradient aborts before any
    /// parameter or moment is touched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::contract(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (id, g) in grads.iter() {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Dimension {
                    op: "adam",
                    left: params.get(id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::numerical(format!(
                    "non-finite gradient for parameter {}",
                    params.name(id)
                )));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (id, g) in grads.iter() {
            let m = self.first_moment[id.index()].data_mut();
            let v = self.second_moment[id.index()].data_mut();
            let p = params.get_mut(id).data_mut();
            for (((pi, mi), vi), gi) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
