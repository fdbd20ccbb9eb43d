use crate::ndtensor::Tensor;
use crate::scalar::Scalar;

use super::ParamSet;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T = f64> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then re-applies
    /// each parameter's bounds. Frozen parameters are skipped.
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for k in 0..w.len() {
                m[k] = self.beta1 * m[k] + (one - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (one - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.clamp_to_bounds();
        }
    }
}
