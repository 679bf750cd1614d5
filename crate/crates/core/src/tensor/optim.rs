use serde::{Deserialize, Serialize};

use super::graph::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub betas: (f64, f64),
    /// Global L2 clipping threshold; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            epsilon: 1e-8,
            warmup_steps: 100,
            total_steps: 1000,
            betas: (0.9, 0.999),
            max_grad_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Linear warmup to the base rate, then linear decay to zero at `total_steps`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} beyond total_steps {}",
                self.total_steps
            )));
        }
        let warm = if self.warmup_steps == 0 { 1.0 } else { step as f64 / self.warmup_steps as f64 };
        let decay_span = (self.total_steps - self.warmup_steps) as f64;
        let decay = if decay_span == 0.0 {
            if step >= self.total_steps { 0.0 } else { 1.0 }
        } else {
            (self.total_steps - step) as f64 / decay_span
        };
        Ok(self.learning_rate * warm.min(decay).max(0.0))
    }
}

/// AdamW with decoupled weight decay, driven by the grads held in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    last_step: usize,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, first: Vec::new(), second: Vec::new(), last_step: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn last_step(&self) -> usize {
        self.last_step
    }

    /// Applies one update at 1-based `step` and clears the store's grads.
    /// Returns the effective learning rate used.
    pub fn step(&mut self, params: &mut ParamStore, step: usize) -> Result<f64> {
        let lr = self.config.lr_at(step)?;
        if self.first.len() != params.len() {
            self.first = (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect();
            self.second = self.first.clone();
        }
        let clip = match self.config.max_grad_norm {
            Some(max) => {
                let norm = params.global_grad_norm();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let (b1, b2) = self.config.betas;
        let t = step.max(1) as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (eps, wd) = (self.config.epsilon, self.config.weight_decay);
        for i in 0..params.len() {
            let tensor = params.tensor_mut(i);
            if !tensor.requires_grad() {
                tensor.zero_grad();
                continue;
            }
            let Some(grad) = tensor.take_grad() else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j] * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p *= 1.0 - lr * wd;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.last_step = step;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg() -> OptimizerConfig {
        OptimizerConfig { learning_rate: 0.1, warmup_steps: 10, total_steps: 110, ..Default::default() }
    }

    #[test]
    fn schedule_peaks_at_warmup_and_ends_at_zero() {
        let c = cfg();
        assert_eq!(c.lr_at(10).unwrap(), 0.1);
        assert_eq!(c.lr_at(110).unwrap(), 0.0);
        assert!((c.lr_at(5).unwrap() - 0.05).abs() < 1e-15);
        assert!((c.lr_at(60).unwrap() - 0.05).abs() < 1e-15);
        assert!(c.lr_at(111).is_err());
    }

    #[test]
    fn rejects_warmup_beyond_total() {
        let c = OptimizerConfig { warmup_steps: 5, total_steps: 4, ..Default::default() };
        assert!(AdamW::new(c).is_err());
    }

    #[test]
    fn single_scalar_step_matches_hand_evaluation() {
        // p=2, g=0.5, step 1 with warmup 0: lr_eff = lr * (total-1)/total.
        let c = OptimizerConfig {
            learning_rate: 0.01,
            weight_decay: 0.1,
            epsilon: 1e-8,
            warmup_steps: 0,
            total_steps: 4,
            betas: (0.9, 0.999),
            max_grad_norm: None,
        };
        let mut store = ParamStore::new();
        let i = store.insert("p", Tensor::new(vec![1], vec![2.0]).unwrap());
        store.tensor_mut(i).set_grad(vec![0.5]);
        let mut opt = AdamW::new(c).unwrap();
        let lr = opt.step(&mut store, 1).unwrap();
        assert!((lr - 0.0075).abs() < 1e-15);
        // m_hat = g, v_hat = g^2 after bias correction -> update = g/(|g|+eps).
        let expected = 2.0 * (1.0 - 0.0075 * 0.1) - 0.0075 * 0.5 / (0.5 + 1e-8);
        assert!((store.tensor(i).data()[0] - expected).abs() < 1e-15);
        assert!(store.tensor(i).grad().is_none());
    }

    #[test]
    fn clipping_scales_large_gradients() {
        let c = OptimizerConfig {
            learning_rate: 1.0,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: 10,
            max_grad_norm: Some(1.0),
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let i = store.insert("p", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        store.tensor_mut(i).set_grad(vec![30.0, 40.0]);
        assert!((store.global_grad_norm() - 50.0).abs() < 1e-12);
        let mut opt = AdamW::new(c).unwrap();
        opt.step(&mut store, 1).unwrap();
        // Adam normalizes the magnitude, so the clipped step keeps the sign pattern.
        let d = store.tensor(i).data();
        assert!(d[0] < 0.0 && d[1] < 0.0);
    }
}
