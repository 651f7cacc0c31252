use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One AdamW update at learning rate `lr`: decoupled decay
    /// `θ ← θ(1 - lr·λ)` followed by the bias-corrected Adam step.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        config: &AdamWConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} params and {} grads for state of {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        let decay = 1.0 - lr * config.weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = config.beta1 * self.m[i] + (1.0 - config.beta1) * g;
            self.v[i] = config.beta2 * self.v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + config.eps);
        }
        Ok(())
    }
}

/// Step decay: `base * gamma^floor(epoch / step)`.
pub fn lr_schedule(base: f64, epoch: usize, step: usize, gamma: f64) -> f64 {
    if step == 0 {
        return base;
    }
    base * gamma.powi((epoch / step) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_every_three_epochs() {
        let lr: Vec<f64> = (0..7).map(|e| lr_schedule(1.0, e, 3, 0.1)).collect();
        assert_eq!(lr[0], 1.0);
        assert_eq!(lr[2], 1.0);
        assert!((lr[3] - 0.1).abs() < 1e-15);
        assert!((lr[5] - 0.1).abs() < 1e-15);
        assert!((lr[6] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first step is lr * g / (|g| + eps)
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = AdamWState::new(2);
        let mut p = vec![1.0, -1.0];
        s.step(&mut p, &[0.5, -2.0], 0.01, &cfg).unwrap();
        assert!((p[0] - (1.0 - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
        assert!((p[1] - (-1.0 + 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut s = AdamWState::new(1);
        let mut p = vec![2.0];
        s.step(&mut p, &[0.0], 0.1, &cfg).unwrap();
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut s = AdamWState::new(2);
        let mut p = vec![0.0; 3];
        assert!(s
            .step(&mut p, &[0.0; 3], 0.1, &AdamWConfig::default())
            .is_err());
    }
}
