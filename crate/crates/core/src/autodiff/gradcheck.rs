use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

fn report(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> GradCheckReport {
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        passed: max_rel_error <= tol,
    }
}

fn scalar_of(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares tape gradients of a scalar function against central finite
/// differences at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let out = f(&mut tape, x)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(x)
        .map_or_else(|| vec![0.0; point.numel()], |g| g.data().to_vec());

    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p, false);
        let out = f(&mut tape, x)?;
        scalar_of(&tape, out)
    };
    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = point.clone();
        minus.data_mut()[i] -= FD_STEP;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * FD_STEP));
    }
    Ok(report(analytic, numeric, tol))
}

/// Same check with respect to one stored parameter. At most `max_entries`
/// coordinates (evenly strided) are perturbed.
pub fn grad_check_param<F>(
    store: &mut ParamStore,
    id: ParamId,
    f: F,
    tol: f64,
    max_entries: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    let param_var = tape.param(store, id);
    let grads = tape.backward(out)?;
    let full = grads
        .wrt(param_var)
        .map_or_else(|| vec![0.0; store.value(id).numel()], |g| g.data().to_vec());

    let n = store.value(id).numel();
    let stride = (n / max_entries.max(1)).max(1);
    let coords: Vec<usize> = (0..n).step_by(stride).take(max_entries.max(1)).collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let out = f(&mut tape, store)?;
        scalar_of(&tape, out)
    };
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in &coords {
        let original = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = original + FD_STEP;
        let up = eval(store);
        store.value_mut(id).data_mut()[i] = original - FD_STEP;
        let down = eval(store);
        store.value_mut(id).data_mut()[i] = original;
        numeric.push((up? - down?) / (2.0 * FD_STEP));
        analytic.push(full[i]);
    }
    Ok(report(analytic, numeric, tol))
}
