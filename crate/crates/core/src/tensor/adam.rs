use super::param::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<S>>,
    pub second_moment: Vec<Vec<S>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros = |_| -> Vec<Vec<S>> {
            store
                .iter()
                .map(|(_, p)| vec![S::zero(); p.value.len()])
                .collect()
        };
        Self {
            config,
            first_moment: zeros(()),
            second_moment: zeros(()),
            t: 0,
        }
    }

    /// Applies one update with learning rate `lr`, then clears every gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
        }
        if let Some((_, bad)) = store.iter().find(|(_, p)| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite {
                op: format!("gradient of {}", bad.name),
            });
        }
        self.t += 1;
        adam_update(
            store,
            &mut self.first_moment,
            &mut self.second_moment,
            lr,
            self.config,
            self.t,
        );
        store.zero_grad();
        Ok(())
    }
}

/// One bias-corrected Adam update at step `t` (t >= 1), in place.
pub fn adam_update<S: Scalar>(
    store: &mut ParamStore<S>,
    m: &mut [Vec<S>],
    v: &mut [Vec<S>],
    lr: f64,
    cfg: AdamConfig,
    t: u64,
) {
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let c1 = S::one() - b1.powi(t as i32);
    let c2 = S::one() - b2.powi(t as i32);
    let (lr, eps) = (S::lit(lr), S::lit(cfg.eps));
    for ((p, m), v) in store.iter_mut().zip(m).zip(v) {
        let data = p.value.data_mut();
        for i in 0..data.len() {
            let g = p.grad[i];
            m[i] = b1 * m[i] + (S::one() - b1) * g;
            v[i] = b2 * v[i] + (S::one() - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // t=1: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::scalar(0.0));
        store.get_mut(id).grad[0] = 1.0;
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, 0.1).unwrap();
        let delta = store.get(id).value.item();
        assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((delta + 0.1).abs() < 1e-8);
        assert_eq!(store.get(id).grad[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::scalar(2.0));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.first_moment[0][0] = 1.0;
        adam.second_moment[0][0] = 1.0;
        adam.step(&mut store, 0.01).unwrap();
        // m_hat = 0.9 / 0.1 = 9 is nonzero, so only check the decay.
        assert!((adam.first_moment[0][0] - 0.9).abs() < 1e-15);
        assert!((adam.second_moment[0][0] - 0.999).abs() < 1e-15);
        let mut store2 = ParamStore::<f64>::new();
        let id2 = store2.add("x", Tensor::scalar(2.0));
        let mut fresh = Adam::new(AdamConfig::default(), &store2);
        fresh.step(&mut store2, 0.01).unwrap();
        assert_eq!(store2.get(id2).value.item(), 2.0);
        let _ = id;
    }

    #[test]
    fn identical_params_follow_identical_trajectories() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::scalar(0.3));
        let b = store.add("b", Tensor::scalar(0.3));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for k in 0..20 {
            let g = (k as f64 * 0.7).sin();
            store.get_mut(a).grad[0] = g;
            store.get_mut(b).grad[0] = g;
            adam.step(&mut store, 0.05).unwrap();
            assert_eq!(store.get(a).value.item().to_bits(), store.get(b).value.item().to_bits());
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("guidance.w_out", Tensor::scalar(0.0));
        store.get_mut(id).grad[0] = f64::NAN;
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let err = adam.step(&mut store, 0.1).unwrap_err();
        assert!(err.to_string().contains("guidance.w_out"));
    }
}
