//! AdamW with decoupled weight decay, and the warmup/linear-decay schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PhaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
            weight_decay: 0.01,
        }
    }
}

/// Linear `0 → peak` over `[0, warmup]`, then `peak → 0` over `[warmup, total]`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    peak * (total - step) as f64 / (total - warmup) as f64
}

/// Moments are keyed by parameter name so they survive a checkpoint round
/// trip into a freshly built store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `ids` from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) -> Result<()> {
        for &id in ids {
            if store.get(id).grad.is_none() {
                return Err(PhaError::Contract(format!(
                    "parameter {} has no gradient",
                    store.get(id).name
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for &id in ids {
            let p = store.get_mut(id);
            let shape = p.value.shape().to_vec();
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            let g = p.grad.as_ref().expect("checked above").data();
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * g[i];
                let vi = &mut v.data_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * g[i] * g[i];
                let update = (m.data()[i] / c1) / ((v.data()[i] / c2).sqrt() + eps);
                theta[i] -= lr * update + lr * weight_decay * theta[i];
            }
        }
        Ok(())
    }
}

/// Scale all gradients in `ids` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = ids
        .iter()
        .filter_map(|&id| store.get(id).grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for &id in ids {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 10, 3e-4), 0.0);
        assert_eq!(lr_at(10, 100, 10, 3e-4), 3e-4);
        assert!((lr_at(55, 100, 10, 3e-4) - 1.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(100, 100, 10, 3e-4), 0.0);
    }

    fn store_with(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::full(&[1], value), true).unwrap();
        s.get_mut(id).grad = Some(Tensor::full(&[1], grad));
        (s, id)
    }

    #[test]
    fn zero_gradient_only_decays() {
        let (mut s, id) = store_with(2.0, 0.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, &[id], 0.1).unwrap();
        assert_eq!(s.value(id).data()[0], 2.0 - 0.1 * 0.01 * 2.0);
    }

    #[test]
    fn first_step_is_sign_like() {
        let (mut s, id) = store_with(0.0, 4.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, &[id], 1e-3).unwrap();
        // m̂ = g, v̂ = g², so the delta is −lr·g/(|g| + eps).
        let expected = -1e-3 * 4.0 / (4.0 + 1e-8);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut s, id) = store_with(1.0, 1.0);
        s.get_mut(id).grad = None;
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut s, &[id], 1e-3), Err(PhaError::Contract(_))));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping_rescales() {
        let (mut s, id) = store_with(0.0, 3.0);
        let n = clip_grad_norm(&mut s, &[id], 1.0);
        assert_eq!(n, 3.0);
        assert_eq!(s.get(id).grad.as_ref().unwrap().data()[0], 1.0);
    }
}
