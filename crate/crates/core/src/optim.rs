use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam optimizer state for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Tensor,
    v: Tensor,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], lr: f64) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update to `param` in place.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.m.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "param {:?}, grad {:?}, state {:?}",
                    param.shape(),
                    grad.shape(),
                    self.m.shape()
                ),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let p = param.data_mut();
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.data()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(param: &Tensor, grad: &Tensor, state: &mut AdamState) -> Result<Tensor> {
    let mut out = param.clone();
    state.step(&mut out, grad)?;
    Ok(out)
}
