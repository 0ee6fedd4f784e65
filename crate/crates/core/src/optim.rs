//! Adam without weight decay.

use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor first/second moment state.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new<'a>(cfg: AdamConfig, params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let first: Vec<Matrix> = params
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let second = first.clone();
        Self {
            cfg,
            step: 0,
            first,
            second,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. `grads[k]` pairs with `params[k]`;
    /// a missing gradient leaves that tensor and its moments untouched.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Matrix], grads: &[Option<&Matrix>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape("adam parameter list", self.first.len(), params.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.cfg.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.cfg.beta2, t as f64);
        for k in 0..params.len() {
            let Some(g) = grads[k] else { continue };
            if g.shape() != params[k].shape() {
                return Err(Error::shape(
                    "adam gradient",
                    alloc::format!("{:?}", params[k].shape()),
                    alloc::format!("{:?}", g.shape()),
                ));
            }
            let m = self.first[k].as_mut_slice();
            let v = self.second[k].as_mut_slice();
            let p = params[k].as_mut_slice();
            for (((pi, mi), vi), gi) in p.iter_mut().zip(m).zip(v).zip(g.as_slice()) {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (libm::sqrt(v_hat) + self.cfg.eps);
            }
        }
        Ok(())
    }
}
