use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as the
/// denominator so coordinates with vanishing gradient are judged absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Checks the tape gradient of a scalar function `f` at `x` against
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate.
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let analytic = {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let loss = f(&tape, v)?;
        tape.backward(loss)?.wrt(v).into_data()
    };

    let eval = |probe: Tensor| -> Result<f64, E> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&tape, v)?;
        let value = out.value();
        value
            .item()
            .ok_or_else(|| TensorError::NonScalarLoss(value.shape().to_vec()).into())
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        numeric.push((hi - lo) / (2.0 * eps));
    }

    let mut max_rel_error = 0.0;
    let mut max_abs_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
        max_abs_error = f64::max(max_abs_error, abs);
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        max_abs_error,
        worst_index,
        tolerance: tol,
        passed: max_rel_error < tol,
    })
}
