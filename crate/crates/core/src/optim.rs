//! Adam optimizer over a model's named parameters.

use ndarray::ArrayD;

use crate::model::ModelInstance;

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8). State is
/// indexed by parameter-entry position, so it stays valid for the lifetime of
/// one model instance.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<ArrayD<f64>>>,
    v: Vec<Option<ArrayD<f64>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update from `(entry index, gradient)` pairs. Buffers are
    /// never touched; head parameters are skipped while the head is frozen.
    pub fn step(&mut self, model: &mut ModelInstance, grads: &[(usize, ArrayD<f64>)]) {
        let n = model.params().len();
        if self.m.len() < n {
            self.m.resize(n, None);
            self.v.resize(n, None);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, grad) in grads {
            if model.skip_update(*idx) {
                continue;
            }
            let m = self.m[*idx].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self.v[*idx].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *m).and(grad).for_each(|mi, &gi| {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            });
            let value = model.param_value_mut(*idx);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
