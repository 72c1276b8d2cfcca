//! Adam with bias correction.

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter and clears all
    /// gradients. Fails, before touching anything, if a trainable parameter
    /// has not received a gradient since the previous step.
    pub fn step(&mut self, store: &mut ParamStore, learning_rate: f64) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && !p.grad_ready) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        while self.first_moment.len() < store.len() {
            let size = store.iter().nth(self.first_moment.len()).map_or(0, |(_, p)| p.value.len());
            self.first_moment.push(vec![0.0; size]);
            self.second_moment.push(vec![0.0; size]);
        }
        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);

        for (i, param) in store.params_mut().iter_mut().enumerate() {
            if param.trainable {
                let m = &mut self.first_moment[i];
                let v = &mut self.second_moment[i];
                let grads = param.grad.data();
                for (j, value) in param.value.data_mut().iter_mut().enumerate() {
                    let g = grads[j];
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[j] / correction1;
                    let v_hat = v[j] / correction2;
                    *value -= learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::{Gradients, Tensor};

    fn scalar_store(theta: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::scalar(theta)).unwrap();
        store
    }

    fn set_grad(store: &mut ParamStore, g: f64) {
        let mut grads = Gradients::zeros(1);
        grads.per_param[0] = Some(Tensor::scalar(g));
        store.accumulate(&grads, 1.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = scalar_store(1.25);
        let mut adam = Adam::default();
        for _ in 0..5 {
            set_grad(&mut store, 0.0);
            adam.step(&mut store, 0.1).unwrap();
        }
        assert_eq!(store.value(store.id("theta").unwrap()).data()[0], 1.25);
    }

    #[test]
    fn first_step_is_a_sign_step_of_size_lr() {
        for g in [3.0, -0.002, 250.0] {
            let mut store = scalar_store(0.0);
            set_grad(&mut store, g);
            Adam::default().step(&mut store, 0.01).unwrap();
            let moved = store.value(store.id("theta").unwrap()).data()[0];
            assert!((moved + 0.01 * g.signum()).abs() < 1e-6, "{g}: {moved}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        // Independent scalar rendition of the update rule.
        let (mut theta, mut m, mut v) = (3.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * theta;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        }

        let mut store = scalar_store(3.0);
        let mut adam = Adam::default();
        for _ in 0..200 {
            let current = store.value(store.id("theta").unwrap()).data()[0];
            set_grad(&mut store, 2.0 * current);
            adam.step(&mut store, 0.1).unwrap();
        }
        let got = store.value(store.id("theta").unwrap()).data()[0];
        assert!(got.abs() < 0.05, "{got}");
        assert!((got - theta).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut store = scalar_store(1.0);
        match Adam::default().step(&mut store, 0.1) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "theta"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gradients_are_cleared_after_a_step() {
        let mut store = scalar_store(1.0);
        set_grad(&mut store, 1.0);
        Adam::default().step(&mut store, 0.1).unwrap();
        let p = store.get(store.id("theta").unwrap());
        assert!(!p.grad_ready);
        assert_eq!(p.grad.data()[0], 0.0);
    }
}
