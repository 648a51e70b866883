//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and step counter. Buffers are allocated lazily on the
/// first step and indexed like the store's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// One update of every trainable parameter, then clears gradients.
    ///
    /// Every trainable parameter must carry a gradient (call
    /// [`ParamStore::zero_grad`] before accumulating).
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.frozen && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.first_moment.is_empty() {
            for (_, p) in store.iter() {
                let (r, c) = (p.value.rows(), p.value.cols());
                self.first_moment.push(Tensor::zeros(r, c));
                self.second_moment.push(Tensor::zeros(r, c));
            }
        }
        if self.first_moment.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let m = &mut self.first_moment[id.index()];
            let v = &mut self.second_moment[id.index()];
            for (((w, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w *= 1.0 - lr * weight_decay;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.clear_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(p));
        (s, id)
    }

    fn set_grad(s: &mut ParamStore, id: crate::params::ParamId, g: f64) {
        s.get_mut(id).grad = Some(Tensor::scalar(g));
    }

    #[test]
    fn zero_gradient_without_decay_leaves_param() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamWState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        set_grad(&mut s, id, 0.0);
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).item(), 1.0);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m̂ = v̂ = 1 after bias correction, so p = 1 - 0.001 / (1 + 1e-8)
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamWState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        set_grad(&mut s, id, 1.0);
        opt.step(&mut s).unwrap();
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
        assert!((s.value(id).item() - 0.999).abs() < 1e-10);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn first_moment_tracks_constant_gradient() {
        let (mut s, id) = scalar_store(0.0);
        let mut opt = AdamWState::new(AdamWConfig::default());
        for k in 1..=200u64 {
            set_grad(&mut s, id, 0.7);
            opt.step(&mut s).unwrap();
            assert_eq!(opt.step, k);
        }
        let m = opt.first_moment[0].item();
        assert!((m - 0.7).abs() < 0.7 * 0.9f64.powi(200) + 1e-12);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let (mut s, _) = scalar_store(1.0);
        let mut opt = AdamWState::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut s), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut s = ParamStore::new();
        let a = s.add("enc.w", Tensor::scalar(1.0));
        let b = s.add("head.w", Tensor::scalar(1.0));
        s.set_frozen("enc.", true);
        s.zero_grad();
        s.get_mut(b).grad = Some(Tensor::scalar(1.0));
        let mut opt = AdamWState::new(AdamWConfig::default());
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(a).item(), 1.0);
        assert!(s.value(b).item() < 1.0);
    }
}
