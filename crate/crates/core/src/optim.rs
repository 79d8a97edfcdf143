//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (_, name, t) in params.iter() {
                s.add(name, Tensor::zeros(t.shape()));
            }
            s
        };
        Self { config, t: 0, m: zeros(), v: zeros() }
    }

    /// Rebuilds state from saved moments, checking names and shapes.
    pub fn from_state(params: &ParamStore<T>, config: AdamConfig, t: u64, m: ParamStore<T>, v: ParamStore<T>) -> Result<Self> {
        for store in [&m, &v] {
            if store.len() != params.len() {
                return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
            }
            for ((_, a, ta), (_, b, tb)) in params.iter().zip(store.iter()) {
                if a != b || ta.shape() != tb.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state entry {b} does not match parameter {a}")));
                }
            }
        }
        Ok(Self { config, t, m, v })
    }

    /// One update with learning rate `lr`. `grads[i]` belongs to parameter
    /// `i`; `None` leaves that parameter and its moments untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = T::of(lr * bc2.sqrt() / bc1);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.eps * bc2.sqrt()));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(i);
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let p = params.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_entry_by_lr() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]));
        let mut adam = Adam::new(&p, AdamConfig::default());
        let g = vec![Some(Tensor::from_vec(&[3], vec![0.3, -7.0, 1e-3]))];
        adam.step(&mut p, &g, 0.01);
        let w = p.get(ParamId(0)).data();
        for (got, want) in w.iter().zip([0.99, -1.99, 0.49]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParamStore::new();
        p.add("x", Tensor::from_vec(&[2], vec![3.0f64, -4.0]));
        let mut adam = Adam::new(&p, AdamConfig::default());
        for _ in 0..3000 {
            let x = p.get(ParamId(0)).data().to_vec();
            let g = Tensor::from_vec(&[2], x.iter().map(|v| 2.0 * v).collect());
            adam.step(&mut p, &[Some(g)], 0.01);
        }
        assert!(p.get(ParamId(0)).data().iter().all(|v| v.abs() < 1e-2));
    }
}
