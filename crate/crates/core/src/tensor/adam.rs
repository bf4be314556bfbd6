use crate::tensor::matrix::Matrix;
use crate::tensor::store::ParamStore;
use indexmap::IndexMap;
use std::collections::HashMap;

/// Plain Adam. Only the learning rate varies across training stages;
/// beta/eps defaults are the usual ones.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: HashMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Apply one update from a gradient map. Only parameters present in the
    /// map (i.e. trainable ones) are touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Matrix>) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = match store.get_mut(name) {
                Ok(p) => p,
                Err(_) => continue,
            };
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (Matrix::zeros(g.rows, g.cols), Matrix::zeros(g.rows, g.cols)));
            for i in 0..g.data.len() {
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g.data[i];
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
                let mhat = m.data[i] / b1t;
                let vhat = v.data[i] / b2t;
                p.value.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
