use crate::error::Result;
use crate::linalg::Matrix;

use super::{Tape, Var};

/// Finite-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero entries from
/// dominating through cancellation noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

fn eval<F>(build: &F, inputs: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Maximum relative error between tape gradients of the scalar built by
/// `build` and central differences with step `h`, over every input entry.
pub fn grad_error<F>(build: F, inputs: &[Matrix], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
        for idx in 0..input.len() {
            let orig = input.data()[idx];
            probe[k].data_mut()[idx] = orig + h;
            let plus = eval(&build, &probe)?;
            probe[k].data_mut()[idx] = orig - h;
            let minus = eval(&build, &probe)?;
            probe[k].data_mut()[idx] = orig;
            worst = worst.max(relative_error(analytic.data()[idx], (plus - minus) / (2.0 * h)));
        }
    }
    Ok(worst)
}
