//! Adam optimizer over a [`ParamSet`].

use super::{ParamSet, Tensor};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let m = (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape())).collect();
        let v = (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    /// One update. `grads[i]` aligns with parameter index `i`; `None` means
    /// the parameter did not participate in this graph and is left alone.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let Some(g) = &grads[i] else {
                continue;
            };
            let p = params.tensor_mut(i);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
