//! Central finite-difference gradient checking.

use super::{Result, Tape, Tensor, Var};

/// Magnitude below which gradients are compared absolutely. Central
/// differences at `eps = 1e-5` on an O(1) loss carry rounding noise near
/// `1e-16 / 1e-5 = 1e-11`, so smaller gradients cannot be resolved to a
/// relative 1e-4; this floor makes them pass only when they agree to 1e-10.
pub const REL_FLOOR: f64 = 1e-6;

/// Where the largest disagreement of a gradient check occurred.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
    pub max_rel: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares tape gradients of a scalar function against central finite
/// differences over every element of every input.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut worst = GradCheckReport::default();
    let mut point: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for idx in 0..inputs[which].numel() {
            let orig = inputs[which].data()[idx];
            point[which].data_mut()[idx] = orig + eps;
            let plus = eval(&point)?;
            point[which].data_mut()[idx] = orig - eps;
            let minus = eval(&point)?;
            point[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst.max_rel {
                worst = GradCheckReport {
                    max_rel: rel,
                    input: which,
                    index: idx,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

/// Largest relative error of [`grad_check_report`].
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(f, inputs, eps)?.max_rel)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
