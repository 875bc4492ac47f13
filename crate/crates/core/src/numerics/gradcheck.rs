use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the tape gradient of a scalar function against central finite
/// differences over every coordinate of every input.
///
/// `f` receives a fresh tape with the inputs registered as leaves (in order)
/// and returns the loss node.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let l = tape.scalar(loss);
        if !l.is_finite() {
            return Err(Error::NonFinite("grad_check loss"));
        }
        Ok(l)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.dense(*var);
        for c in 0..inputs[i].numel() {
            let orig = inputs[i].data()[c];
            probe[i].data_mut()[c] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[c] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = (analytic[c] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (i, c);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
