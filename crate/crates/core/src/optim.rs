//! Adam optimizer with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::tensor::{Element, Parameter};

/// Adam state over a fixed parameter list. Moments are indexed by position,
/// so the parameter list must not be reordered between steps.
pub struct Adam<T: Element> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64, params: &[Parameter<T>]) -> Self {
        Adam {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            step_count: 0,
            m: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One in-place update over all parameters from their populated gradients.
    pub fn step(&mut self, params: &mut [Parameter<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam: {} parameters, optimizer built for {}",
                params.len(),
                self.m.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = T::ONE - pow(self.beta1, t);
        let bc2 = T::ONE - pow(self.beta2, t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("adam: missing gradient for {}", p.name)))?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (T::ONE - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (T::ONE - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.values[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn pow<T: Element>(base: T, exp: i32) -> T {
    let mut out = T::ONE;
    for _ in 0..exp {
        out *= base;
    }
    out
}
