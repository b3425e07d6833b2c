//! Adam with bias correction and no weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from named gradients. Parameters without a gradient
    /// this step keep their moments untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (name, grad) in grads {
            let param = store.get_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("{:?}", param.shape()),
                    format!("{:?}", grad.shape()),
                ));
            }
            let n = param.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let p = param.data_mut();
            let g = grad.data();
            for i in 0..n {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.0));
        let mut opt = Adam::new(0.01);
        opt.apply(&mut store, &[("p".into(), Tensor::scalar(5.0))])
            .unwrap();
        // Bias correction makes the first step lr * g/|g| up to eps.
        let moved = store.get("p").unwrap().scalar_value();
        assert!((moved + 0.01).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(-4.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..600 {
            let p = store.get("p").unwrap().scalar_value();
            let grad = 2.0 * (p - 3.0);
            opt.apply(&mut store, &[("p".into(), Tensor::scalar(grad))])
                .unwrap();
        }
        let p = store.get("p").unwrap().scalar_value();
        assert!((p - 3.0).abs() < 1e-3, "p = {p}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::zeros(&[2, 2]));
        let mut opt = Adam::new(0.1);
        assert!(opt
            .apply(&mut store, &[("p".into(), Tensor::zeros(&[4]))])
            .is_err());
    }
}
