//! Central finite-difference validation of backward rules.

use super::graph::{Graph, Tape, Var};
use crate::tensor::{Result, Tensor};

/// Largest per-coordinate discrepancy between the reverse-mode gradient of a
/// scalar function and its central difference with step `h`, measured as
/// `|analytic − numeric| / max(1, |numeric|)`.
///
/// `f` receives a fresh tape and the input as a leaf, and must return a
/// single-element node. Evaluate away from kinks (ReLU at 0, L1 ties).
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_at(f, input, h, 0..input.len())
}

/// [`grad_check`] restricted to the listed flat coordinates, for inputs too
/// large to perturb exhaustively.
pub fn grad_check_at<F>(f: F, input: &Tensor, h: f64, coords: impl IntoIterator<Item = usize>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let out = f(&mut tape, v)?;
        Ok(tape.value(&out).item())
    };

    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let out = f(&mut tape, x)?;
    let analytic = tape
        .backward(out)
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(input.shape()));

    let mut worst = 0.0f64;
    for i in coords {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
