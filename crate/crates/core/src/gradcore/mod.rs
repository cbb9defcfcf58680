//! Minimal reverse-mode automatic differentiation.
//!
//! [`Tape`] records tensor operations and replays them backwards;
//! [`ParamStore`] owns the trainable weights and the optimizer moments;
//! [`gradient_check`] compares tape gradients against central differences.

mod params;
mod tape;
mod tensor;

pub use params::{Param, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a 1x1 root, got {shape:?}")]
    NonScalarRoot { shape: (usize, usize) },
    #[error("function evaluation was not finite during gradient check")]
    NonFiniteEvaluation,
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over every
/// coordinate of `point`, with central differences of width `2 * step`.
///
/// `f` receives one leaf per tensor in `point` and must return a `1 x 1`
/// node.
pub fn gradient_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64, GradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    let evaluate = |values: &[Tensor]| -> Result<f64, GradError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
        let root = f(&mut tape, &vars).map_err(|_| GradError::NonFiniteEvaluation)?;
        let v = tape.value(root).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(GradError::NonFiniteEvaluation)
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.input(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut probe: Vec<Tensor> = point.to_vec();
    let mut worst = 0.0_f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..point[k].len() {
            let original = point[k].data()[i];
            probe[k].data_mut()[i] = original + step;
            let up = evaluate(&probe)?;
            probe[k].data_mut()[i] = original - step;
            let down = evaluate(&probe)?;
            probe[k].data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
