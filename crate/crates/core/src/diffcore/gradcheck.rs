use super::params::{BoundParams, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences of a scalar function of a flat vector.
pub fn central_difference(
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe)?;
        probe[i] = orig - h;
        let fm = f(&probe)?;
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("function value at coordinate {i}")));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Max relative error between two gradients, and where it occurs.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat parameter index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval_value<F>(params: &ParameterStore, f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let out = f(&tape, &bound)?;
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    Ok(v)
}

/// Reverse-mode gradient of `f` with respect to every parameter.
pub fn analytic_gradient<F>(params: &ParameterStore, f: &F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = f(&tape, &bound)?;
    let grads = tape.backward(out)?;
    let flat = bound
        .collect(&grads)
        .into_iter()
        .flat_map(|t| t.into_data())
        .collect();
    Ok((out.item(), flat))
}

/// Compares reverse-mode gradients of `f` against central differences on
/// every parameter coordinate.
pub fn gradient_check<F>(params: &ParameterStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    let all: Vec<usize> = (0..params.num_scalars()).collect();
    gradient_check_subset(params, h, &all, f)
}

/// As [`gradient_check`], restricted to the given flat coordinates.
pub fn gradient_check_subset<F>(
    params: &ParameterStore,
    h: f64,
    coords: &[usize],
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (_, full) = analytic_gradient(params, &f)?;
    let base = params.flatten();
    let mut probe = params.clone();
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut flat = base.clone();
    for &i in coords {
        flat[i] = base[i] + h;
        probe.set_flat(&flat)?;
        let fp = eval_value(&probe, &f)?;
        flat[i] = base[i] - h;
        probe.set_flat(&flat)?;
        let fm = eval_value(&probe, &f)?;
        flat[i] = base[i];
        analytic.push(full[i]);
        numeric.push((fp - fm) / (2.0 * h));
    }
    let (max_rel_err, worst) = max_relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        max_rel_err,
        worst_index: coords.get(worst).copied().unwrap_or(0),
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn square_at_three() {
        let mut p = ParameterStore::new();
        p.insert("x", Tensor::scalar(3.0)).unwrap();
        let rep = gradient_check(&p, 1e-5, |_, b| Ok(b.var("x")?.square())).unwrap();
        assert_eq!(rep.analytic, vec![6.0]);
        assert!((rep.numeric[0] - 6.0).abs() < 1e-8);
        assert!(rep.max_rel_err < 1e-10);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let mut p = ParameterStore::new();
        p.insert("x", Tensor::scalar(-1.0)).unwrap();
        assert!(gradient_check(&p, 1e-5, |_, b| Ok(b.var("x")?.sqrt())).is_err());
    }
}
