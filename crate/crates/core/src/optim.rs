use serde::{Deserialize, Serialize};

use crate::error::{LwfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(LwfError::InvalidConfig(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// AdamW moments and step counter for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, dim: usize) -> Self {
        Self {
            config,
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grad.len() != params.len() {
            return Err(LwfError::DimensionMismatch {
                what: "optimizer input",
                got: grad.len().max(params.len()),
                expected: self.first_moment.len(),
            });
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        for i in 0..params.len() {
            let g = grad[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            params[i] = params[i] * decay - c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_against_the_gradient_sign() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, -2.0]).unwrap();
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p[0] - (1.0 - 3e-3 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-1.0 + 3e-3 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 1);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0]).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn converges_on_a_convex_quadratic() {
        // f(x) = 0.5 * sum a_i (x_i - c_i)^2
        let a = [1.0, 4.0, 0.25, 9.0];
        let c = [0.3, -1.2, 2.0, 0.05];
        let cfg = AdamWConfig {
            learning_rate: 1e-2,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 4);
        let mut x = vec![0.0; 4];
        for _ in 0..20_000 {
            let g: Vec<f64> = (0..4).map(|i| a[i] * (x[i] - c[i])).collect();
            opt.step(&mut x, &g).unwrap();
        }
        for i in 0..4 {
            assert!((x[i] - c[i]).abs() < 1e-6, "coordinate {i}: {} vs {}", x[i], c[i]);
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut opt = AdamW::new(AdamWConfig::default(), 3);
        assert!(opt.step(&mut [0.0; 3], &[0.0; 2]).is_err());
    }
}
