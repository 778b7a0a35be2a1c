use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and step counter for AdamW.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl OptimizerState {
    /// Allocates zeroed moments shaped like `params`.
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (first_moment, second_moment) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
        Self {
            config,
            first_moment,
            second_moment,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One AdamW update with decoupled weight decay. Every parameter must
    /// carry a gradient buffer.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::Usage(format!("parameter {i} has no gradient")));
            }
            if p.numel() != self.first_moment[i].len() {
                return Err(Error::Shape(format!("parameter {i} changed size")));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().expect("checked above").to_vec();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                *w -= c.learning_rate * c.weight_decay * *w;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}
