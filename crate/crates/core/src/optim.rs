//! Bias-corrected Adam.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: HashMap::new(), v: HashMap::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient in `grads`.
    /// Parameters are visited in storage order so results do not depend on
    /// hash iteration order.
    pub fn step(&mut self, params: &mut Params, grads: &HashMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = params.get_mut(&name).expect("listed above");
            if p.dims() != g.dims() {
                return Err(Error::shape("adam", format!("{name}: param {:?} vs grad {:?}", p.dims(), g.dims())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.dims()));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(g.dims()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning rate after halving at 70 %, 85 % and 95 % of `total` iterations.
pub fn halving_schedule(base: f64, iteration: usize, total: usize) -> f64 {
    let frac = iteration as f64 / total.max(1) as f64;
    let halvings = [0.70, 0.85, 0.95].iter().filter(|&&m| frac >= m).count();
    base * 0.5f64.powi(halvings as i32)
}
