//! Adam with bias correction, and a gradient buffer with global-norm
//! clipping.

use crate::autodiff::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Gradients summed over a batch, one slot per parameter.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        GradBuffer {
            slots: vec![None; store.len()],
        }
    }

    /// Add the gradients of every parameter accepted by `keep`.
    pub fn accumulate(&mut self, grads: &Gradients, keep: impl Fn(ParamId) -> bool) {
        let mut entries: Vec<(ParamId, &Tensor)> = grads.params().filter(|(id, _)| keep(*id)).collect();
        entries.sort_by_key(|(id, _)| id.index());
        for (id, g) in entries {
            match &mut self.slots[id.index()] {
                Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g.data().to_vec()),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.slots.iter_mut().flatten() {
            v.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.index()).and_then(|s| s.as_deref())
    }

    /// Name of the first parameter holding a non-finite gradient.
    pub fn first_non_finite<'a>(&self, store: &'a ParamStore) -> Option<&'a str> {
        store
            .ids()
            .find(|&id| self.get(id).is_some_and(|g| g.iter().any(|x| !x.is_finite())))
            .map(|id| store.name(id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moment estimates, parallel to the parameter store.
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One update of every parameter with a gradient in `grads`. Nothing is
    /// changed when any gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) -> Result<()> {
        if let Some(name) = grads.first_non_finite(store) {
            return Err(Error::NonFiniteGradient { name: name.to_string() });
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
