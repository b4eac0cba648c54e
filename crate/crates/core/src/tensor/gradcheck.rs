use super::{Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen in each parameter, in argument order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error at this scale.
const REL_FLOOR: f64 = 1e-6;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<T, F>(f: &F, params: &[Tensor<T>]) -> Result<f64, TensorError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.scalar_value(out).as_f64();
    if !v.is_finite() {
        return Err(TensorError::NonFinite {
            op: "check_gradients",
        });
    }
    Ok(v)
}

/// Checks the tape gradient of the scalar function `f` at `params` against
/// `(f(θ+εe) − f(θ−εe)) / 2ε` for every coordinate.
pub fn check_gradients<T, F>(
    f: F,
    params: &[Tensor<T>],
    eps: T,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, TensorError>,
{
    if eps <= T::zero() {
        return Err(TensorError::InvalidEpsilon);
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar_value(out).is_finite() {
        return Err(TensorError::NonFinite {
            op: "check_gradients",
        });
    }
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(&tape, var);
        let mut worst = 0.0f64;
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps.as_f64());
            worst = worst.max(relative_error(analytic[j].as_f64(), numeric));
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tol,
        passed: max_rel_error <= tol,
    })
}
