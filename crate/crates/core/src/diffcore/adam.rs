//! Adam optimizer with bias correction.
//!
//! Moment buffers are keyed by parameter name but the update walks the
//! store in registration order, so a step is a pure function of
//! (state, params, grads) with no iteration-order nondeterminism.

use std::collections::HashMap;

use super::params::{Gradients, ParamStore};
use super::tensor::{Element, Tensor};

pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    moments: HashMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, moments: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over all trainable parameters. Parameters missing from
    /// `grads` are treated as having zero gradient. Panics on a non-finite
    /// gradient so divergence is reported at the step that produced it.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for (name, tensor, trainable) in params.iter_mut() {
            if !trainable {
                continue;
            }
            let zero;
            let g = if grads.contains(name) {
                grads.get(name)
            } else {
                zero = Tensor::zeros(tensor.shape());
                &zero
            };
            assert_eq!(g.shape(), tensor.shape(), "gradient shape mismatch for {name}");
            assert!(g.all_finite(), "non-finite gradient for {name}");
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(tensor.shape()), Tensor::zeros(tensor.shape())));
            let pd = tensor.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = g.data();
            for i in 0..pd.len() {
                md[i] = b1.mul(md[i]).add(one_m_b1.mul(gd[i]));
                vd[i] = b2.mul(vd[i]).add(one_m_b2.mul(gd[i].mul(gd[i])));
                let mhat = md[i].mul(inv_bc1);
                let vhat = vd[i].mul(inv_bc2);
                pd[i] = pd[i].sub(lr.mul(mhat).div(vhat.sqrt().add(eps)));
            }
        }
    }
}
