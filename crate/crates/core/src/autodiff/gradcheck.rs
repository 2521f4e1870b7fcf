use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Compares the tape gradient of a scalar function against central finite
/// differences, one coordinate at a time.
///
/// Returns `max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-8)`. The step actually
/// taken is measured after rounding `x +- eps` to `T`, so the comparison is
/// not biased by the representation of `eps`.
pub fn grad_check<T, F>(mut f: F, input: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check eps {eps} must be positive")));
    }
    let mut tape = Tape::new();
    let x = tape.param(input.clone())?;
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic: Vec<f64> = match tape.grad(x) {
        Some(g) => g.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; input.numel()],
    };

    let mut eval = |probe: Tensor<T>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe)?;
        let out = f(&mut t, v)?;
        Ok(t.value(out).item()?.as_f64())
    };

    let mut worst = 0.0f64;
    for i in 0..input.numel() {
        let base = input.data()[i];
        let up = T::from_f64(base.as_f64() + eps);
        let down = T::from_f64(base.as_f64() - eps);
        let mut plus = input.clone();
        plus.data_mut()[i] = up;
        let mut minus = input.clone();
        minus.data_mut()[i] = down;
        let step = up.as_f64() - down.as_f64();
        let numeric = (eval(plus)? - eval(minus)?) / step;
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
