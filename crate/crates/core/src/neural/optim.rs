use super::{Grads, ParamStore};
use crate::real::Real;

/// Bias-corrected Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        assert_eq!(grads.0.len(), self.m.len(), "optimizer state layout");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(&grads.0)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let step = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] = T::of(p[i].as_f64() - step);
            }
        }
    }
}
