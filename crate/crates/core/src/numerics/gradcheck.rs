use crate::error::{Error, Result};

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates to probe. `None` probes every parameter.
    pub coords: Option<Vec<usize>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate that produced `max_rel_err`.
    pub worst: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`; exactly 0 when both are 0.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// `f` is evaluated at perturbed copies of `params`; the input slice is left
/// untouched. A non-finite objective aborts the check.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    params: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if analytic.len() != params.len() {
        return Err(Error::dim(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let all: Vec<usize>;
    let coords: &[usize] = match &opts.coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    for &i in coords {
        if i >= params.len() {
            return Err(Error::dim(format!("coordinate {i} out of range")));
        }
        let orig = work[i];
        work[i] = orig + opts.eps;
        let up = f(&work);
        work[i] = orig - opts.eps;
        let down = f(&work);
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective is non-finite when perturbing coordinate {i} (f+ = {up}, f- = {down})"
            )));
        }
        let numeric = (up - down) / (2.0 * opts.eps);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some(i);
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
