//! Central finite-difference checks for graph-built functions.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;

/// Per-input comparison between the analytic and numerical gradient.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// `max |analytic - numeric| / max(max |numeric|, 1e-6)` for each input.
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<F>(inputs: &[Tensor], build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Compare reverse-mode gradients of the scalar built by `build` with central
/// differences, perturbing every element of every input.
pub fn gradient_check<F>(inputs: &[Tensor], mut build: F) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].dims()));
        let mut max_diff = 0.0f64;
        let mut max_num = 0.0f64;
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + FD_EPS;
            let plus = eval(&work, &mut build)?;
            work[k].data_mut()[i] = orig - FD_EPS;
            let minus = eval(&work, &mut build)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            max_diff = max_diff.max((numeric - analytic.data()[i]).abs());
            max_num = max_num.max(numeric.abs());
        }
        rel_errors.push(max_diff / max_num.max(1e-6));
    }
    Ok(GradReport { rel_errors })
}

/// Panicking wrapper around [`gradient_check`] for tests.
pub fn check_gradients<F>(inputs: &[Tensor], tol: f64, build: F)
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = gradient_check(inputs, build).expect("graph build failed");
    for (i, e) in report.rel_errors.iter().enumerate() {
        assert!(*e < tol, "input {i}: relative gradient error {e:.3e} >= {tol:.1e}");
    }
}
