//! Logistic regression by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{ModelFrame, LAG};
use crate::error::{Error, Result};
use crate::linalg::{self, inv_logit, log1p_exp, max_abs};

/// Working-correlation parameter as reported by a GEE fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Value used in the working correlation at convergence.
    pub value: f64,
    /// Moment estimate at the final coefficients, even when `value` was fixed.
    pub moment_estimate: Option<f64>,
    pub estimated: bool,
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub subject: f64,
    pub item: f64,
    /// Set when either variance sits on the zero boundary.
    pub boundary: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub covariance_model: DMatrix<f64>,
    pub covariance_robust: Option<DMatrix<f64>>,
    pub dispersion: Option<f64>,
    pub correlation: Option<CorrelationReport>,
    pub variance_components: Option<VarianceComponents>,
    pub log_likelihood: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the estimating function at the returned coefficients.
    pub gradient_norm: f64,
}

impl FitResult {
    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn coef(&self, name: &str) -> Result<f64> {
        Ok(self.coefficients[self.index(name)?])
    }

    pub fn se_model(&self, name: &str) -> Result<f64> {
        let j = self.index(name)?;
        Ok(self.covariance_model[(j, j)].max(0.0).sqrt())
    }

    /// Robust SE when available, otherwise model-based.
    pub fn se(&self, name: &str) -> Result<f64> {
        let j = self.index(name)?;
        let cov = self.covariance_robust.as_ref().unwrap_or(&self.covariance_model);
        Ok(cov[(j, j)].max(0.0).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IrlsOptions {
    pub max_iter: usize,
    pub score_tol: f64,
    pub deviance_tol: f64,
    pub separation_limit: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            score_tol: 1e-8,
            deviance_tol: 1e-10,
            separation_limit: 15.0,
        }
    }
}

/// Bernoulli log-likelihood of `y` under linear predictor `X β`.
pub fn log_likelihood(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter().zip(y).map(|(&e, &yi)| yi * e - log1p_exp(e)).sum()
}

/// Score `Xᵀ(y − p)` and information `XᵀWX` at `beta`.
pub fn score_information(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eta = x * beta;
    let q = x.ncols();
    let mut resid = DVector::zeros(y.len());
    let mut sqrt_w = DVector::zeros(y.len());
    for i in 0..y.len() {
        let p = inv_logit(eta[i]);
        resid[i] = y[i] - p;
        sqrt_w[i] = (p * (1.0 - p)).sqrt();
    }
    let score = x.tr_mul(&resid);
    let mut xw = x.clone();
    for j in 0..q {
        xw.column_mut(j).component_mul_assign(&sqrt_w);
    }
    let info = linalg::symmetrize(&xw.tr_mul(&xw));
    (score, info)
}

pub fn fit_irls(frame: &ModelFrame) -> Result<FitResult> {
    fit_irls_with(frame, IrlsOptions::default())
}

pub fn fit_irls_with(frame: &ModelFrame, opts: IrlsOptions) -> Result<FitResult> {
    let x = &frame.design;
    let y = &frame.response;
    let q = x.ncols();
    if y.is_empty() {
        return Err(Error::EmptyInput("no rows to fit".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain("response must be 0/1".into()));
    }
    let collinear = linalg::collinear_columns(&x.tr_mul(x), &frame.column_names);
    if !collinear.is_empty() {
        return Err(Error::Singular(collinear));
    }

    let mut beta = DVector::<f64>::zeros(q);
    let mut ll = log_likelihood(x, y, &beta);
    let mut converged = false;
    let mut iterations = 0;
    let (mut score, mut info) = score_information(x, y, &beta);
    while iterations < opts.max_iter {
        if max_abs(&score) < opts.score_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let delta = linalg::cholesky(&info, "XᵀWX")?.solve(&score);
        // Deviance is -2 ll; halve the step until it does not increase.
        let mut step = 1.0;
        let (mut candidate, mut cand_ll);
        loop {
            candidate = &beta + &delta * step;
            cand_ll = log_likelihood(x, y, &candidate);
            if cand_ll >= ll - 1e-12 * ll.abs() || step < 1e-6 {
                break;
            }
            step *= 0.5;
        }
        let rel_change = ((cand_ll - ll) / (ll.abs() + 0.1)).abs();
        beta = candidate;
        ll = cand_ll;
        (score, info) = score_information(x, y, &beta);
        let small_score = max_abs(&score) < opts.score_tol;
        if let Some((j, b)) = beta.iter().enumerate().find(|(_, b)| b.abs() > opts.separation_limit) {
            if !small_score {
                return Err(Error::Separation {
                    column: frame.column_names[j].clone(),
                    value: *b,
                });
            }
        }
        // A tiny deviance change with a large score means the step was
        // halved to nothing; only the score decides convergence.
        if small_score || (rel_change < opts.deviance_tol && max_abs(&score) < opts.score_tol.sqrt()) {
            converged = true;
            break;
        }
    }
    if converged {
        // One extra Newton step; quadratic convergence takes the score
        // to rounding level at negligible cost.
        if let Ok(chol) = linalg::cholesky(&info, "XᵀWX") {
            let polished = &beta + chol.solve(&score);
            let pll = log_likelihood(x, y, &polished);
            let (ps, pi) = score_information(x, y, &polished);
            if pll >= ll - 1e-12 * ll.abs() && max_abs(&ps) <= max_abs(&score) {
                (beta, ll, score, info) = (polished, pll, ps, pi);
            }
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            detail: format!("IRLS score max-norm {:.3e}", max_abs(&score)),
        });
    }
    let covariance = linalg::spd_inverse(&info, "XᵀWX")?;
    Ok(FitResult {
        names: frame.column_names.clone(),
        coefficients: beta.iter().copied().collect(),
        covariance_model: covariance,
        covariance_robust: None,
        dispersion: None,
        correlation: None,
        variance_components: None,
        log_likelihood: Some(ll),
        iterations,
        converged,
        gradient_norm: max_abs(&score),
    })
}

/// Logistic fit of a lag-augmented frame; the lag coefficient is reported
/// as `Ylag-1`.
pub fn fit_lag(frame: &ModelFrame) -> Result<FitResult> {
    if frame.column(LAG).is_none() {
        return Err(Error::Structure(format!(
            "frame has no `{LAG}` column; build it with lag = true"
        )));
    }
    fit_irls(frame)
}
