use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Decoupled-weight-decay Adam. Moment buffers exist only for parameters
/// that were trainable when the optimizer was created.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) || weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid lr {lr} / weight decay {weight_decay}")));
        }
        let moments = store
            .iter()
            .map(|(_, _, t)| t.requires_grad().then(|| (vec![0.0; t.len()], vec![0.0; t.len()])))
            .collect();
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Scalars held in moment buffers.
    pub fn state_len(&self) -> usize {
        self.moments.iter().flatten().map(|(m, _)| 2 * m.len()).sum()
    }

    /// Updates every parameter that has a moment buffer and is still
    /// trainable, using its accumulated gradient (missing gradient = zero).
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (id, slot) in ids.into_iter().zip(self.moments.iter_mut()) {
            let Some((m, v)) = slot else { continue };
            let tensor = store.get_mut(id);
            if !tensor.requires_grad() {
                continue;
            }
            let (data, grad) = tensor.data_grad_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                data[i] -= self.lr * (update + self.weight_decay * data[i]);
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for t in store.tensors_mut() {
            if let (_, Some(g)) = t.data_grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(&[1.0, -2.0, 0.5]).with_requires_grad(true)).unwrap();
        s.add("frozen", Tensor::row(&[3.0, 4.0])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_step_only_decays() {
        let mut s = store();
        let mut opt = AdamW::new(&s, 0.1, 0.0).unwrap();
        let before = s.checksum("");
        opt.step(&mut s);
        assert_eq!(s.checksum(""), before);

        let mut opt = AdamW::new(&s, 0.1, 0.5).unwrap();
        opt.step(&mut s);
        let w = s.by_name("w").unwrap().data();
        for (a, b) in w.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b * (1.0 - 0.05)).abs() < 1e-15);
        }
        assert_eq!(s.by_name("frozen").unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn first_step_is_bounded_by_lr() {
        let mut s = store();
        let id = s.id("w").unwrap();
        s.get_mut(id).accumulate_grad(&[0.3, -7.0, 1e-3]).unwrap();
        let mut opt = AdamW::new(&s, 0.01, 0.0).unwrap();
        opt.step(&mut s);
        let w = s.get(id).data();
        for ((new, old), g) in w.iter().zip([1.0, -2.0, 0.5]).zip([0.3, -7.0, 1e-3]) {
            let delta: f64 = new - old;
            assert!(delta.abs() <= 0.01 + 1e-12);
            assert!(delta * g < 0.0);
            // m̂/√v̂ = g/|g| on the first step
            assert!((delta.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn buffers_only_for_trainable() {
        let s = store();
        assert_eq!(AdamW::new(&s, 0.1, 0.0).unwrap().state_len(), 6);
        assert!(AdamW::new(&s, 0.0, 0.0).is_err());
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut s = store();
        let id = s.id("w").unwrap();
        s.get_mut(id).accumulate_grad(&[3.0, 4.0, 0.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((grad_norm(&s) - 1.0).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut s, 2.0), grad_norm(&s));
    }
}
