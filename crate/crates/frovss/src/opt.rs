//! AdamW with per-parameter learning rates.
//!
//! Learning rates come from the parameter store (set by the
//! fine-tuning policy); weight decay is decoupled and applied to every
//! trainable parameter.

use ndarray::Array2;

use crate::encoders::ParamStore;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let m = store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        let v = store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// One update; `grads[i]` pairs with the i-th declared parameter
    /// and may be `None` for frozen or unused parameters.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, (_, param)) in store.iter_mut().enumerate() {
            if !param.trainable {
                continue;
            }
            let Some(grad) = grads[idx].as_ref() else {
                continue;
            };
            let lr = param.lr;
            // decoupled weight decay
            if self.weight_decay > 0.0 {
                param.value.mapv_inplace(|w| w - lr * self.weight_decay * w);
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut param.value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    pub fn iterations(&self) -> u64 {
        self.step
    }
}
