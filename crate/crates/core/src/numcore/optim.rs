use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// A non-finite gradient aborts the step with parameters untouched.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.all_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter {}",
                p.name
            )));
        }
        let t = store.step() + 1;
        store.set_step(t);
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for p in store.params_mut() {
            let grads = p.grad.data();
            let m = p.first_moment.data_mut();
            for (mi, gi) in m.iter_mut().zip(grads) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = p.second_moment.data_mut();
            for (vi, gi) in v.iter_mut().zip(grads) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (p.first_moment.data(), p.second_moment.data());
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn scalar_store(theta: f64) -> (ParamStore, crate::numcore::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::row(vec![theta])).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = scalar_store(0.7);
        Adam::default().step(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], 0.7);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        s.param_mut(id).grad.data_mut()[0] = 1.0;
        Adam::with_lr(0.01).step(&mut s).unwrap();
        let delta = s.value(id).data()[0] - 1.0;
        assert!((delta + 0.01).abs() < 1e-9, "delta {delta}");
        assert_eq!(s.grad(id).data()[0], 0.0);
    }

    #[test]
    fn converges_on_quadratic() {
        let (mut s, id) = scalar_store(1.0);
        let adam = Adam::with_lr(0.01);
        let mut steps = 0;
        while s.value(id).data()[0].abs() >= 1e-3 {
            let theta = s.value(id).data()[0];
            s.param_mut(id).grad.data_mut()[0] = 2.0 * theta;
            adam.step(&mut s).unwrap();
            steps += 1;
            assert!(steps <= 2000, "no convergence after 2000 steps");
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut s, id) = scalar_store(1.0);
        s.param_mut(id).grad.data_mut()[0] = f64::NAN;
        assert!(matches!(Adam::default().step(&mut s), Err(Error::Numeric(_))));
        assert_eq!(s.value(id).data()[0], 1.0);
        assert_eq!(s.step(), 0);
    }
}
