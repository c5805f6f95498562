use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamWConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{path}.{name}"), format!("must be in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("{path}.eps"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("{path}.weight_decay"), "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = || -> Vec<Vec<T>> { store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect() };
        AdamW { cfg, m: zeros(), v: zeros(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `grads[i]` belongs to the i-th parameter of `store`;
    /// `None` (unreached parameter) counts as a zero gradient. Buffers are
    /// never updated. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<&[T]>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid("adamw_step", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.len() != store.get(id).numel() {
                    return Err(Error::shape("adamw_step", format!("gradient of '{}' has {} values", store.name(id), g.len())));
                }
                if store.is_trainable(id) && !g.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite { what: "gradient", name: store.name(id).to_string() });
                }
            }
        }
        self.steps += 1;
        let c = self.cfg;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        let (lr_t, decay, eps) = (T::lit(lr), T::lit(lr * c.weight_decay), T::lit(c.eps));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let g = grads[k].map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                p[i] = p[i] - decay * p[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Base rate up to `round(0.8 · total)` epochs, a tenth of it afterwards.
pub fn lr_at_epoch(epoch: usize, base: f64, total: usize) -> f64 {
    let drop = (0.8 * total as f64).round() as usize;
    if epoch <= drop { base } else { base / 10.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at_epoch(240, 4e-5, 300), 4e-5);
        assert!((lr_at_epoch(241, 4e-5, 300) - 4e-6).abs() < 1e-20);
        assert_eq!(lr_at_epoch(24, 1.0, 30), 1.0);
        assert_eq!(lr_at_epoch(25, 1.0, 30), 0.1);
        assert_eq!(lr_at_epoch(1, 1.0, 1), 1.0);
    }

    #[test]
    fn decay_only_with_zero_grad() {
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::full(vec![1], 1.0));
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let g = [0.0f64];
        opt.step(&mut store, &[Some(&g[..])], 4e-5).unwrap();
        assert_eq!(store.get(store.find("p").unwrap()).data()[0], 1.0 - 4e-9);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::full(vec![2], 0.5));
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(&store, cfg);
        let g = [3.0f64, -0.2];
        opt.step(&mut store, &[Some(&g[..])], 1e-3).unwrap();
        let p = store.get(store.find("p").unwrap()).data();
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-10);
        assert!((p[1] - (0.5 + 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::<f32>::new();
        store.add("head.w", Tensor::full(vec![1], 1.0));
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let g = [f32::NAN];
        let err = opt.step(&mut store, &[Some(&g[..])], 1e-3).unwrap_err();
        assert!(err.to_string().contains("head.w"));
        assert_eq!(store.get(store.find("head.w").unwrap()).data()[0], 1.0);
    }
}
