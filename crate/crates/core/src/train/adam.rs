//! Adam with bias correction.
//!
//! Parameters are value tensors; a step reads the accumulated gradient
//! buffers and replaces each parameter with a freshly built leaf tensor,
//! keeping the tensor immutability contract intact.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Adam {
        Adam {
            beta1,
            beta2,
            epsilon,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers in parameter order (m, v), for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restore optimizer state (resume support).
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Apply one update with learning rate `lr`. `grads[i]` is the gradient
    /// for `params[i]`; moment buffers are allocated lazily on first use.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::usage(format!(
                "adam: {} params vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (name, p)) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != p.numel() {
                return Err(Error::usage(format!(
                    "adam: gradient for `{name}` has {} values, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = p.data().to_vec();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
            **p = Tensor::from_vec(p.shape(), data, true)?;
        }
        Ok(())
    }
}
