use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Linear warmup to `base_lr` at `warmup_steps`, then cosine decay to zero at
/// `total_steps`.
pub fn cosine_lr(step: u64, warmup_steps: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::Config(format!(
            "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::Argument(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam with decoupled weight decay. Frozen tensors are skipped entirely:
/// no moment update and no decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update with learning rate `lr` from `(name, grad)` pairs.
    ///
    /// The schedule reaches exactly zero at its ends, so `lr == 0` is accepted
    /// (moments still advance); negative or non-finite rates are rejected.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Vec<f32>)], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let lr32 = lr as f32;
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Argument(format!("gradient for unknown parameter {name:?}")))?;
            if p.frozen {
                continue;
            }
            if g.len() != p.data.len() {
                return Err(Error::Shape(format!(
                    "gradient of {name:?} has {} values, parameter {}",
                    g.len(),
                    p.data.len()
                )));
            }
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let decay = 1.0 - lr32 * self.weight_decay;
            for i in 0..g.len() {
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g[i];
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = mom.m[i] as f64 / bc1;
                let v_hat = mom.v[i] as f64 / bc2;
                let update = (m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
                p.data[i] = p.data[i] * decay - lr32 * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_knots() {
        let base = 5e-4;
        assert_eq!(cosine_lr(100, 100, 1000, base).unwrap(), base);
        assert_eq!(cosine_lr(1000, 100, 1000, base).unwrap(), 0.0);
        let mid = cosine_lr(550, 100, 1000, base).unwrap();
        assert!((mid - base / 2.0).abs() < 1e-15);
        assert_eq!(cosine_lr(0, 100, 1000, base).unwrap(), 0.0);
        assert!((cosine_lr(50, 100, 1000, base).unwrap() - base / 2.0).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_config() {
        assert!(matches!(cosine_lr(0, 10, 5, 1.0), Err(Error::Config(_))));
        assert!(cosine_lr(6, 1, 5, 1.0).is_err());
    }

    fn scalar_store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", vec![1], vec![v]).unwrap();
        s
    }

    #[test]
    fn single_step_descends() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut s, &[("p".into(), vec![1.0])], 0.1).unwrap();
        assert!(s.get("p").unwrap().data[0] < 1.0);
    }

    #[test]
    fn negative_lr_is_config_error() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(0.0);
        let r = opt.step(&mut s, &[("p".into(), vec![1.0])], -1e-3);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn frozen_tensor_untouched() {
        let mut s = scalar_store(0.123_456_7);
        s.freeze("p").unwrap();
        let before = s.clone();
        let mut opt = AdamW::new(0.05);
        for _ in 0..50 {
            opt.step(&mut s, &[("p".into(), vec![3.0])], 0.1).unwrap();
        }
        assert_eq!(s.get("p").unwrap().data[0].to_bits(), before.get("p").unwrap().data[0].to_bits());
        assert!(opt.moments.is_empty());
    }

    #[test]
    fn quadratic_bowl_converges() {
        // (p - 3)^2 from p = 0; the known minimizer is the oracle.
        let mut s = scalar_store(0.0);
        let mut opt = AdamW::new(0.0);
        let mut steps = 0;
        for i in 0..2000 {
            let p = s.get("p").unwrap().data[0];
            if (p - 3.0).abs() < 1e-3 {
                break;
            }
            let lr = 0.05 * (1.0 - i as f64 / 2000.0);
            opt.step(&mut s, &[("p".into(), vec![2.0 * (p - 3.0)])], lr).unwrap();
            steps += 1;
        }
        let p = s.get("p").unwrap().data[0];
        assert!((p - 3.0).abs() < 1e-3, "p = {p} after {steps} steps");
    }
}
