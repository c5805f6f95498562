use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences with step `h`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("gradcheck", format!("step must be positive, got {h}")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::invalid("gradcheck", "function must return a scalar"));
        }
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "gradcheck objective", name: format!("{v}") });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFinite { what: "gradcheck objective", name: "analytic pass".into() });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad_slice(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradcheckReport { max_rel_err: 0.0, worst_input: 0, worst_index: 0, coordinates: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        #[allow(clippy::needless_range_loop)]
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (grad[j] - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_input = i;
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}
