//! Adam with bias correction.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const DEFAULT_LEARNING_RATE: f64 = 0.0005;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub moments: IndexMap<String, Moments>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// One update of every parameter accepted by `trainable`, then clears all gradients.
    pub fn step(&mut self, params: &mut ParamStore, trainable: &dyn Fn(&str) -> bool) -> Result<()> {
        for (name, p) in params.iter() {
            if trainable(name) && p.grad.is_none() {
                return Err(Error::usage(format!("parameter {name} has no gradient")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let n = p.value.len();
            let m = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            if m.first.len() != n {
                return Err(Error::usage(format!(
                    "moment buffer for {name} has {} entries, parameter has {n}",
                    m.first.len()
                )));
            }
            let values = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                m.first[i] = self.beta1 * m.first[i] + (1.0 - self.beta1) * g;
                m.second[i] = self.beta2 * m.second[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m.first[i] / bias1;
                let v_hat = m.second[i] / bias2;
                values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            if !values.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric("adam_step", format!("parameter {name} became non-finite")));
            }
        }
        params.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(value)).unwrap();
        store.get_mut("p").unwrap().grad = Some(vec![grad]);
        store
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = scalar_store(1.0, 1.0);
        let mut adam = AdamState::new(DEFAULT_LEARNING_RATE);
        adam.step(&mut store, &|_| true).unwrap();
        let p = store.value("p").unwrap().data()[0];
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - 0.0005 / (1.0 + 1e-8);
        assert!((p - expected).abs() < 1e-15);
        assert!(store.get("p").unwrap().grad.is_none());
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut store = scalar_store(0.7, 0.0);
        let mut adam = AdamState::new(DEFAULT_LEARNING_RATE);
        adam.step(&mut store, &|_| true).unwrap();
        assert_eq!(store.value("p").unwrap().data()[0], 0.7);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn two_steps_follow_recurrence() {
        let mut store = scalar_store(1.0, 0.5);
        let mut adam = AdamState::new(0.01);
        adam.step(&mut store, &|_| true).unwrap();
        store.get_mut("p").unwrap().grad = Some(vec![0.5]);
        adam.step(&mut store, &|_| true).unwrap();
        assert_eq!(adam.step, 2);
        let m = &adam.moments["p"];
        // m1 = 0.05, m2 = 0.9*0.05 + 0.05 = 0.095; v1 = 0.00025, v2 = 0.999*0.00025 + 0.00025
        assert!((m.first[0] - 0.095).abs() < 1e-15);
        assert!((m.second[0] - 0.00049975).abs() < 1e-15);
        // constant gradients: each bias-corrected step is lr / (1 + eps / |g|)
        let p = store.value("p").unwrap().data()[0];
        let step = 0.01 * 1.0 / (1.0 + 1e-8 / 0.5);
        assert!((p - (1.0 - 2.0 * step)).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0)).unwrap();
        let mut adam = AdamState::new(0.1);
        assert!(matches!(adam.step(&mut store, &|_| true), Err(Error::Usage(_))));
        // frozen parameters need no gradient
        adam.step(&mut store, &|_| false).unwrap();
    }
}
