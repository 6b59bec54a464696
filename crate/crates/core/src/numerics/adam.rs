use serde::{Deserialize, Serialize};

use super::tensor::Params;
use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Params<T>, config: AdamConfig) -> Self {
        let zeros = |_| params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        Self {
            config,
            t: 0,
            m: zeros(0),
            v: zeros(1),
        }
    }

    /// One bias-corrected update of every parameter that requires a gradient.
    /// Tensors without gradient tracking are left untouched.
    pub fn step(&mut self, params: &mut Params<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer state covers {} tensors, parameter set has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(id) = params
            .ids()
            .find(|&id| params.get(id).requires_grad() && params.get(id).grad().is_none())
        {
            return Err(Error::contract(format!(
                "parameter {:?} has no gradient; zero_grad before backward",
                params.name(id)
            )));
        }

        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.t as i32));

        for id in params.ids().collect::<Vec<_>>() {
            let tensor = params.get_mut(id);
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            if m.len() != grad.len() {
                return Err(Error::dim(format!(
                    "optimizer moment for tensor {} has {} entries, gradient {}",
                    id.index(),
                    m.len(),
                    grad.len()
                )));
            }
            for (((theta, &g), mi), vi) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
