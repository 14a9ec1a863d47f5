use serde::{Deserialize, Serialize};

use super::{ParamStore, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates per trainable parameter, keyed by the
/// store's path order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamState { config, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One bias-corrected Adam update using the gradients stored in
    /// `params`. Increments `t` exactly once.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<(), TensorError> {
        if !(lr > 0.0) {
            return Err(TensorError::invalid("adam", format!("learning rate must be positive, got {lr}")));
        }
        let trainable: Vec<_> = params.iter_mut().filter(|(_, p)| p.trainable).collect();
        if trainable.len() != self.m.len() {
            return Err(TensorError::invalid("adam", "parameter set changed since the optimizer was created"));
        }
        for ((_, p), m) in trainable.iter().zip(&self.m) {
            if p.value.len() != m.len() || p.grad.len() != m.len() {
                return Err(TensorError::invalid("adam", "parameter shape changed since the optimizer was created"));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((_, p), m), v) in trainable.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr(step) = initial * rate^(step / decay_steps)`, continuous (not staircase).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialDecay {
    pub initial: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
}

impl Default for ExponentialDecay {
    fn default() -> Self {
        ExponentialDecay { initial: 0.01, decay_rate: 0.96, decay_steps: 1000 }
    }
}

impl ExponentialDecay {
    pub fn lr(&self, step: u64) -> f64 {
        self.initial * self.decay_rate.powf(step as f64 / self.decay_steps as f64)
    }
}
