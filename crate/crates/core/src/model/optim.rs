use serde::{Deserialize, Serialize};

use super::{Gradients, ModelError, ModelState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// First and second moment buffers for one flat parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Bias-corrected Adam update for step `t` (1-based).
    pub fn update(&mut self, cfg: &AdamConfig, t: u64, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Adam over both embedding tables. Moments persist across steps.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    users: AdamMoments,
    items: AdamMoments,
}

impl Adam {
    pub fn new(config: AdamConfig, state: &ModelState) -> Self {
        Self {
            config,
            step: 0,
            users: AdamMoments::new(state.user_table.len()),
            items: AdamMoments::new(state.item_table.len()),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts before any parameter
    /// changes.
    pub fn step(&mut self, state: &mut ModelState, grads: &Gradients) -> Result<(), ModelError> {
        if grads.users.dim() != state.user_table.dim() || grads.items.dim() != state.item_table.dim() {
            return Err(ModelError::Shape("gradient shape does not match tables".into()));
        }
        for (table, g) in [("user", &grads.users), ("item", &grads.items)] {
            if let Some(((row, col), _)) = g.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(ModelError::NonFiniteGradient { table, row, col });
            }
        }
        self.step += 1;
        let cfg = self.config;
        self.users.update(
            &cfg,
            self.step,
            state.user_table.as_slice_mut().expect("standard layout"),
            grads.users.as_slice().expect("standard layout"),
        );
        self.items.update(
            &cfg,
            self.step,
            state.item_table.as_slice_mut().expect("standard layout"),
            grads.items.as_slice().expect("standard layout"),
        );
        Ok(())
    }
}
