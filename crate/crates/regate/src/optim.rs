//! Parameter updates. Plain SGD is the default for auditability; Adam is
//! available for runs where convergence speed matters. A non-finite
//! gradient aborts the step before any parameter is touched.

use crate::tensor::{Element, TensorError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimAlgo {
    Sgd,
    Adam,
}

impl Default for OptimAlgo {
    fn default() -> Self {
        OptimAlgo::Sgd
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct Optimizer<T> {
    algo: OptimAlgo,
    lr: f64,
    // Adam first/second moment per parameter tensor, allocated lazily so
    // the layout follows whatever tensor list the caller passes first.
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Element> Optimizer<T> {
    pub fn new(algo: OptimAlgo, lr: f64) -> Self {
        Optimizer {
            algo,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Overrides the learning rate for subsequent steps. Adam moments are
    /// untouched, so callers can anneal the rate mid-run.
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update in place. `params` and `grads` must be aligned,
    /// same tensors in the same order on every call.
    pub fn step(
        &mut self,
        params: &mut [&mut Vec<T>],
        grads: &[Vec<T>],
    ) -> Result<(), TensorError> {
        assert_eq!(params.len(), grads.len(), "params/grads misaligned");
        for (p, g) in params.iter().zip(grads) {
            assert_eq!(p.len(), g.len(), "params/grads misaligned");
        }
        for g in grads {
            if !g.iter().all(|x| x.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: "optimizer_step",
                });
            }
        }
        match self.algo {
            OptimAlgo::Sgd => {
                let lr = T::from_f64(self.lr);
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &gi) in p.iter_mut().zip(g) {
                        *w = *w - lr * gi;
                    }
                }
            }
            OptimAlgo::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
                    self.v = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
                }
                self.t += 1;
                let b1 = T::from_f64(ADAM_BETA1);
                let b2 = T::from_f64(ADAM_BETA2);
                let one = T::one();
                let eps = T::from_f64(ADAM_EPS);
                let corr1 = T::from_f64(1.0 - ADAM_BETA1.powi(self.t as i32));
                let corr2 = T::from_f64(1.0 - ADAM_BETA2.powi(self.t as i32));
                let lr = T::from_f64(self.lr);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for i in 0..g.len() {
                        m[i] = b1 * m[i] + (one - b1) * g[i];
                        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                        let mhat = m[i] / corr1;
                        let vhat = v[i] / corr2;
                        p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
