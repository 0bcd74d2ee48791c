use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const RMSPROP_RHO: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;

/// RMSprop: `acc ← ρ·acc + (1−ρ)·g²`, `θ ← θ − lr·g/(√acc + ε)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rmsprop {
    pub rho: f64,
    pub eps: f64,
}

impl Default for Rmsprop {
    fn default() -> Self {
        Rmsprop {
            rho: RMSPROP_RHO,
            eps: RMSPROP_EPS,
        }
    }
}

impl Rmsprop {
    /// Applies one update. Every trainable parameter must have a gradient;
    /// gradients are validated before any parameter changes.
    pub fn step(&self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let p = store.param(*id);
            if g.shape() != p.tensor.shape() {
                return Err(Error::Dimension {
                    op: "rmsprop gradient",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.path.clone()));
            }
        }
        for (id, p) in store.iter() {
            if p.trainable && !grads.iter().any(|(g, _)| g == &id) {
                return Err(Error::Config(format!(
                    "no gradient for trainable parameter `{}`",
                    p.path
                )));
            }
        }
        let params = store.params_mut();
        for (id, g) in grads {
            let p = &mut params[id.0];
            if !p.trainable {
                continue;
            }
            let acc = p.accumulator.data_mut();
            let theta = p.tensor.data_mut();
            for ((a, t), &gv) in acc.iter_mut().zip(theta.iter_mut()).zip(g.data()) {
                *a = self.rho * *a + (1.0 - self.rho) * gv * gv;
                *t -= lr * gv / (a.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Rmsprop::step`].
pub fn rmsprop_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    learning_rate: f64,
    rho: f64,
    eps: f64,
) -> Result<()> {
    Rmsprop { rho, eps }.step(store, grads, learning_rate)
}

/// Learning-rate state that halves (by `decay_factor`) when validation loss
/// stalls for `patience` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub best_validation_loss: f64,
    pub epochs_since_improvement: usize,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, decay_factor: f64, patience: usize) -> Self {
        OptimizerState {
            learning_rate,
            decay_factor,
            patience,
            best_validation_loss: f64::INFINITY,
            epochs_since_improvement: 0,
        }
    }

    /// Records an epoch's validation loss; returns true when the rate decays.
    pub fn observe(&mut self, validation_loss: f64) -> bool {
        if validation_loss < self.best_validation_loss {
            self.best_validation_loss = validation_loss;
            self.epochs_since_improvement = 0;
            return false;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            self.learning_rate *= self.decay_factor;
            self.epochs_since_improvement = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut s, id) = scalar_store(0.7);
        for _ in 0..10 {
            rmsprop_step(&mut s, &[(id, Tensor::scalar(0.0))], 1e-3, 0.99, 1e-8).unwrap();
        }
        assert_eq!(s.get(id).data()[0], 0.7);
        assert_eq!(s.param(id).accumulator.data()[0], 0.0);
    }

    #[test]
    fn first_step_closed_form() {
        let (g, lr, rho, eps) = (0.3, 1e-2, 0.99, 1e-8);
        let (mut s, id) = scalar_store(1.0);
        rmsprop_step(&mut s, &[(id, Tensor::scalar(g))], lr, rho, eps).unwrap();
        let want = 1.0 - lr * g / (((1.0 - rho) * g * g).sqrt() + eps);
        assert!((s.get(id).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_accumulator_converges_monotonically() {
        let g = 2.0;
        let (mut s, id) = scalar_store(0.0);
        let mut prev = 0.0;
        for n in 1..=2000 {
            rmsprop_step(&mut s, &[(id, Tensor::scalar(g))], 1e-3, 0.99, 1e-8).unwrap();
            let a = s.param(id).accumulator.data()[0];
            // geometric series: g²·(1 − ρⁿ)
            let want = g * g * (1.0 - 0.99f64.powi(n));
            assert!((a - want).abs() < 1e-12);
            assert!(a > prev && a <= g * g);
            prev = a;
        }
        assert!((prev - g * g).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = ParamStore::new();
        let id = s.add("encoder.conv1.kernel", Tensor::zeros(&[2]));
        let err = rmsprop_step(
            &mut s,
            &[(id, Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap())],
            1e-3,
            0.99,
            1e-8,
        )
        .unwrap_err();
        assert!(err.to_string().contains("encoder.conv1.kernel"));
        assert_eq!(s.get(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1]));
        assert!(rmsprop_step(&mut s, &[], 1e-3, 0.99, 1e-8).is_err());
    }

    #[test]
    fn plateau_decays_once_per_patience_window() {
        let mut st = OptimizerState::new(1e-3, 0.5, 5);
        assert!(!st.observe(1.0));
        for _ in 0..4 {
            assert!(!st.observe(1.0));
        }
        assert!(st.observe(1.5));
        assert_eq!(st.learning_rate, 5e-4);
        assert!(!st.observe(0.9));
        assert_eq!(st.learning_rate, 5e-4);
        let mut lrs = vec![];
        for _ in 0..12 {
            st.observe(2.0);
            lrs.push(st.learning_rate);
        }
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(st.learning_rate, 5e-4 * 0.25);
    }
}
