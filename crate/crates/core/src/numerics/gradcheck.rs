//! Central-difference verification of reverse-mode gradients.
//!
//! Numeric derivatives use the five-point central stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, whose truncation error is
//! O(h^4); with h = 1e-4 in `f64` the roundoff term stays near 1e-12.

use super::{Bindings, Graph, NumericsError, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// coordinates whose true gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            floor: 1e-5,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Analytic gradients of the scalar returned by `f` for every parameter.
pub fn analytic_gradients<F, E>(f: &F, params: &ParamStore<f64>) -> Result<(f64, Vec<Tensor<f64>>), E>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut graph = Graph::new();
    let bindings = params.bind(&mut graph, true);
    let loss = f(&mut graph, &bindings)?;
    let value = graph.value(loss).data()[0];
    let grads = graph.backward(loss)?;
    Ok((value, bindings.collect_grads(params, &grads)))
}

fn evaluate<F, E>(f: &F, params: &ParamStore<f64>) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut graph = Graph::new();
    let bindings = params.bind(&mut graph, false);
    let loss = f(&mut graph, &bindings)?;
    let v = graph.value(loss);
    if v.len() != 1 {
        return Err(NumericsError::NonScalarLoss(v.shape().to_vec()).into());
    }
    Ok(v.data()[0])
}

/// Compare supplied `analytic` gradients against central differences of `f`.
pub fn compare_with_finite_differences<F, E>(
    f: &F,
    params: &ParamStore<f64>,
    analytic: &[Tensor<f64>],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let n = params.get(id).len();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work.get(id).data()[c];
            let mut at = |offset: f64| -> Result<f64, E> {
                work.get_mut(id).data_mut()[c] = orig + offset;
                evaluate(f, &work)
            };
            let h = cfg.eps;
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            work.get_mut(id).data_mut()[c] = orig;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let a = analytic[i].data()[c];
            let err = relative_error(a, numeric, cfg.floor);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = err;
                report.worst_param = Some(params.name(id).to_string());
                report.worst_coord = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Reverse-mode gradients of `f` versus central differences; returns the worst
/// relative error over the checked coordinates.
pub fn check_gradients<F, E>(f: F, params: &ParamStore<f64>, cfg: GradCheckConfig) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let (_, analytic) = analytic_gradients(&f, params)?;
    compare_with_finite_differences(&f, params, &analytic, cfg)
}
