use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged on absolute error.
const REL_FLOOR: f64 = 1e-3;

/// Checks the tape gradient of the scalar function `f` at `x` against
/// central finite differences with step `h`.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_step(h)?;
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck needs a scalar-valued function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(xv, x.shape()).into_data();
    let scalar = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(t.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    compare_with_differences(&analytic, scalar, x, h, tol)
}

/// Compares a supplied gradient against central differences of `f`.
pub fn compare_with_differences<F>(
    analytic: &[f64],
    f: F,
    x: &Tensor,
    h: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    check_step(h)?;
    if analytic.len() != x.numel() {
        return Err(Error::shape("gradcheck", &[analytic.len()], x.shape()));
    }
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max);
    Ok(GradcheckReport {
        analytic: analytic.to_vec(),
        numeric,
        max_rel_err,
        passed: max_rel_err <= tol,
    })
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::Usage(format!("finite-difference step {h} outside [1e-6, 1e-2]")));
    }
    Ok(())
}
