//! Central finite-difference gradient checking.
//!
//! The finite-difference side only ever evaluates the forward pass, so it
//! stays independent of the backward rules it is used to validate.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Finite-difference rule used on the forward side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`. Fourth-order
    /// accurate, so it tolerates larger steps and less cancellation when a
    /// gradient is small next to the function value. Only for smooth
    /// functions: wider steps are more likely to straddle a kink.
    FivePoint,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst `‖g_ad − g_fd‖₂ / max(‖g_ad‖₂, ‖g_fd‖₂)` over the inputs.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Compare autodiff gradients of a scalar function against central
/// differences with step [`DEFAULT_STEP`].
pub fn check_gradients<F>(inputs: &[Tensor], build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients_with_step(inputs, DEFAULT_STEP, build)
}

pub fn check_gradients_with_step<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients_with(inputs, h, Stencil::Central, build)
}

pub fn check_gradients_with<F>(inputs: &[Tensor], h: f64, stencil: Stencil, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    if g.value(root).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    g.backward(root)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, &v) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(v);
        let mut numeric = Tensor::zeros(inputs[idx].shape());
        for j in 0..inputs[idx].len() {
            let x0 = inputs[idx].data()[j];
            let mut at = |dx: f64| -> Result<f64> {
                work[idx].data_mut()[j] = x0 + dx;
                eval(&work)
            };
            numeric.data_mut()[j] = match stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h),
            };
            work[idx].data_mut()[j] = x0;
        }
        let diff = analytic.zip_map(&numeric, |a, b| a - b)?.norm();
        let scale = analytic.norm().max(numeric.norm());
        per_input.push(if scale == 0.0 { diff } else { diff / scale });
    }
    let max_rel_err = per_input.iter().fold(0.0f64, |m, &e| m.max(e));
    Ok(GradReport {
        max_rel_err,
        per_input,
    })
}
