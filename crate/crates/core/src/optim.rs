//! Adam optimizer over a [`ParamSet`]. Moments persist across steps (and
//! across episodes; they are part of trainer checkpoints).

use crate::nets::ParamSet;
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params
                .iter()
                .map(|(_, t)| vec![F::zero(); t.numel()])
                .collect(),
            v: params
                .iter()
                .map(|(_, t)| vec![F::zero(); t.numel()])
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update using the gradient buffers on `params`; parameters whose
    /// gradient is absent are treated as zero-gradient.
    pub fn step(&mut self, params: &mut ParamSet<F>, lr: f64) {
        self.step += 1;
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one = F::one();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr_t = F::of(lr * bc2.sqrt() / bc1);
        let eps = F::of(self.eps);
        for i in 0..params.len() {
            let t = params.tensor_mut(i);
            let Some(grad) = t.grad() else { continue };
            let grad = grad.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = t.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                data[j] = data[j] - lr_t * m[j] / (v[j].sqrt() + eps);
            }
        }
    }

    pub fn moments(&self) -> (&[Vec<F>], &[Vec<F>]) {
        (&self.m, &self.v)
    }

    /// Restores optimizer state from checkpointed moments.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}
