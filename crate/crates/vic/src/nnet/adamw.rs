//! AdamW with decoupled weight decay over any `Parameterized` model.

use std::collections::BTreeMap;

use super::{ParamView, Parameterized};
use crate::error::{Result, VicError};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: per-parameter first/second moments keyed by parameter
/// name, plus a monotone step count.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step_count: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the gradients currently stored in the model.
    ///
    /// Weight decay is decoupled: `p -= lr * wd * p` independent of the
    /// moment-based update.
    pub fn step(&mut self, model: &mut dyn Parameterized) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let cfg = self.cfg;
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);

        let mut err: Option<VicError> = None;
        let moments = &mut self.moments;
        model.visit_params(&mut |name, view: ParamView<'_>| {
            if err.is_some() {
                return;
            }
            let n = view.value.len();
            let slot = moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if slot.m.len() != n {
                err = Some(VicError::Shape(format!(
                    "optimizer state for {name} has {} entries, parameter has {n}",
                    slot.m.len()
                )));
                return;
            }
            for i in 0..n {
                let g = view.grad[i];
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                let prev = view.value[i];
                view.value[i] =
                    prev - cfg.lr * cfg.weight_decay * prev - cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{stream, LinearLayer};

    #[test]
    fn zero_grads_zero_decay_leaves_params() {
        let mut layer = LinearLayer::init(2, 2, &mut stream(1, &[0]));
        let before = layer.weight.clone();
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0));
        opt.step(&mut layer).unwrap();
        assert_eq!(layer.weight, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn decay_only_shrinks_by_lr_wd() {
        let mut layer = LinearLayer::new(1, 1);
        layer.weight.set(0, 0, 1.0);
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.1));
        opt.step(&mut layer).unwrap();
        assert!((layer.weight.get(0, 0) - 0.99).abs() < 1e-15);
    }

    #[test]
    fn gradient_step_descends_quadratic() {
        // f(w) = w^2, analytic gradient 2w; one step from w0=1 must decrease w.
        let mut layer = LinearLayer::new(1, 1);
        layer.weight.set(0, 0, 1.0);
        layer.grad_weight.set(0, 0, 2.0);
        let mut opt = AdamW::new(AdamWConfig::new(0.05, 0.0));
        opt.step(&mut layer).unwrap();
        let w = layer.weight.get(0, 0);
        assert!(w < 1.0, "w did not decrease: {w}");
    }
}
