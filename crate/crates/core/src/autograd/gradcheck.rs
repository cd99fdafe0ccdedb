use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Worst elementwise relative error between the tape gradient of `f` at `x`
/// and central finite differences with step `h`.
///
/// The relative error of one coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// [`grad_check`] restricted to the flat indices in `coords`.
pub fn grad_check_coords<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("grad_check step must be > 0, got {h}")));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = f(&tape, xv)?;
        tape.backward(y)?;
        tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |probe: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.constant(probe);
        f(&tape, xv)?.item()
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
