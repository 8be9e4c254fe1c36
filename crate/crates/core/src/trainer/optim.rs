use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment state for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    cfg: AdamConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u32,
}

impl OptimizerState {
    pub fn new(cfg: AdamConfig, params: &[&Matrix]) -> Self {
        Self {
            cfg,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One descent step `p ← p − lr · m̂ / (sqrt(v̂) + ε)` on every parameter.
    pub fn update(&mut self, params: &mut [Matrix], grads: &[&Matrix], lr: f32) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, got {} values and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "parameter {i} is {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `base_lr / factor^(drops at or before epoch)`.
pub fn lr_schedule(epoch: usize, base_lr: f32, drop_epochs: &[usize], factor: f32) -> f32 {
    let passed = drop_epochs.iter().filter(|&&d| d <= epoch).count();
    base_lr / factor.powi(passed as i32)
}
