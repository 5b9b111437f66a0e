//! Adaptive-moment first-order ascent over the canonical parameter order.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &ModelParams) -> Self {
        let mut m = Vec::new();
        params.for_each(&mut |t| m.push(Tensor::zeros(t.shape())));
        let v = m.clone();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// One ascent step: `p += lr · m̂ / (√v̂ + eps)` with bias-corrected
    /// moments. `grads` must follow [`ModelParams::for_each`] order.
    pub fn ascend(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        let mut count = 0;
        params.for_each(&mut |_| count += 1);
        if grads.len() != count {
            return Err(Error::Shape(format!(
                "got {} gradients for {} parameter tensors",
                grads.len(),
                count
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut k = 0;
        params.for_each_mut(&mut |p| {
            let g = grads[k].data();
            let md = m[k].data_mut();
            let vd = v[k].data_mut();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + (1.0 - b1) * g[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] += lr * mhat / (vhat.sqrt() + eps);
            }
            k += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = ModelConfig { layers: 1, heads: 1, width: 4, vocab: 6, grid_rows: 1, grid_cols: 1, patch_px: 2, max_len: 8, eps: 1e-6 };
        let mut params = init_model(&cfg, 0).unwrap();
        let before = params.clone();
        let mut grads = Vec::new();
        params.for_each(&mut |t| {
            grads.push(Tensor::from_parts(t.shape().to_vec(), vec![1.0; t.numel()]));
        });
        let mut opt = Adam::new(0.0, &params);
        opt.ascend(&mut params, &grads).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn ascent_moves_along_the_gradient_sign() {
        let cfg = ModelConfig { layers: 1, heads: 1, width: 4, vocab: 6, grid_rows: 1, grid_cols: 1, patch_px: 2, max_len: 8, eps: 1e-6 };
        let mut params = init_model(&cfg, 0).unwrap();
        let before = params.patch_embed.clone();
        let mut grads = Vec::new();
        params.for_each(&mut |t| {
            grads.push(Tensor::from_parts(t.shape().to_vec(), vec![1.0; t.numel()]));
        });
        let mut opt = Adam::new(0.01, &params);
        opt.ascend(&mut params, &grads).unwrap();
        for (a, b) in params.patch_embed.data().iter().zip(before.data()) {
            assert!(a > b);
        }
    }
}
