//! Marginal logistic regression by generalized estimating equations.
//!
//! Each subject-item cluster has working covariance
//! `V = α · A^½ R A^½`, where `A` holds the Bernoulli variances and `R` is
//! an independence, AR(1) or banded Toeplitz correlation. Coefficients are
//! found by Fisher scoring on the quasi-score; the AR(1) parameter and the
//! scale are moment estimates from Pearson residuals. Standard errors come
//! from the sandwich `B⁻¹ M B⁻¹`.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::ModelFrame;
use crate::error::{Error, Result};
use crate::glm::{fit_irls, CorrelationReport, FitResult};
use crate::ingest::ClusterKey;
use crate::linalg::{self, inv_logit, max_abs};

pub const DEFAULT_BANDWIDTH: usize = 25;
pub const PHI_CLAMP: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    Independence,
    Ar1,
    ToeplitzBand,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkingCorrelation {
    pub kind: CorrelationKind,
    /// Fixed value, or the starting value when `estimate_phi` is set.
    pub phi: f64,
    pub bandwidth: usize,
    pub ridge: f64,
    pub estimate_phi: bool,
}

impl WorkingCorrelation {
    pub fn independence() -> Self {
        Self {
            kind: CorrelationKind::Independence,
            phi: 0.0,
            bandwidth: 1,
            ridge: 0.0,
            estimate_phi: false,
        }
    }

    pub fn ar1_estimated(ridge: f64) -> Self {
        Self {
            kind: CorrelationKind::Ar1,
            phi: 0.0,
            bandwidth: 1,
            ridge,
            estimate_phi: true,
        }
    }

    pub fn ar1_fixed(phi: f64, ridge: f64) -> Self {
        Self {
            kind: CorrelationKind::Ar1,
            phi,
            bandwidth: 1,
            ridge,
            estimate_phi: false,
        }
    }

    pub fn toeplitz_band(phi: f64, bandwidth: usize, ridge: f64) -> Self {
        Self {
            kind: CorrelationKind::ToeplitzBand,
            phi,
            bandwidth,
            ridge,
            estimate_phi: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi.abs() < 1.0) {
            return Err(Error::Domain(format!("|phi| must be below 1, got {}", self.phi)));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Domain(format!("ridge must be nonnegative, got {}", self.ridge)));
        }
        if self.bandwidth < 1 {
            return Err(Error::Domain("bandwidth must be at least 1".into()));
        }
        if self.estimate_phi && self.kind == CorrelationKind::ToeplitzBand {
            return Err(Error::Domain(
                "phi is fixed for the banded Toeplitz correlation; estimation is AR(1) only".into(),
            ));
        }
        Ok(())
    }
}

/// A working correlation matrix and whether its spectrum had to be floored.
#[derive(Clone, Debug)]
pub struct CorrelationMatrix {
    pub matrix: DMatrix<f64>,
    pub floored: bool,
    /// Frobenius distance between the ridged and the floored matrix.
    pub deviation: f64,
}

pub fn build_correlation(spec: &WorkingCorrelation, t: usize) -> Result<CorrelationMatrix> {
    spec.validate()?;
    if t == 0 {
        return Err(Error::Domain("series length must be at least 1".into()));
    }
    let phi = spec.phi;
    let mut r = DMatrix::<f64>::from_fn(t, t, |l, m| {
        let lag = l.abs_diff(m);
        match spec.kind {
            _ if lag == 0 => 1.0,
            CorrelationKind::Independence => 0.0,
            CorrelationKind::Ar1 => phi.powi(lag as i32),
            CorrelationKind::ToeplitzBand if lag <= spec.bandwidth => phi,
            CorrelationKind::ToeplitzBand => 0.0,
        }
    });
    for i in 0..t {
        r[(i, i)] += spec.ridge;
    }
    if spec.kind == CorrelationKind::Independence {
        return Ok(CorrelationMatrix {
            matrix: r,
            floored: false,
            deviation: 0.0,
        });
    }
    let eig = SymmetricEigen::new(r.clone());
    if eig.eigenvalues.min() > 0.0 {
        return Ok(CorrelationMatrix {
            matrix: r,
            floored: false,
            deviation: 0.0,
        });
    }
    let floor = if spec.ridge > 0.0 { spec.ridge } else { 1e-8 };
    let values = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt =
        linalg::symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose()));
    let deviation = (&rebuilt - &r).norm();
    log::warn!(
        "working correlation (T = {t}) was not positive definite; eigenvalues floored at {floor:e}, deviation {deviation:.3e}"
    );
    Ok(CorrelationMatrix {
        matrix: rebuilt,
        floored: true,
        deviation,
    })
}

/// Applies `R⁻¹` for one cluster length.
#[derive(Clone, Debug)]
enum CorrelationInverse {
    Identity,
    /// Tridiagonal inverse of the unridged AR(1) matrix.
    Ar1(f64),
    Dense(DMatrix<f64>),
}

impl CorrelationInverse {
    fn new(spec: &WorkingCorrelation, t: usize) -> Result<Self> {
        match spec.kind {
            CorrelationKind::Independence if spec.ridge == 0.0 => Ok(Self::Identity),
            CorrelationKind::Ar1 if spec.ridge == 0.0 => Ok(Self::Ar1(spec.phi)),
            _ => {
                let r = build_correlation(spec, t)?;
                Ok(Self::Dense(linalg::spd_inverse(&r.matrix, "working correlation")?))
            }
        }
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Identity => m.clone(),
            Self::Dense(inv) => inv * m,
            Self::Ar1(phi) => {
                let t = m.nrows();
                if t == 1 {
                    return m.clone();
                }
                let c = 1.0 / (1.0 - phi * phi);
                let mut out = DMatrix::zeros(t, m.ncols());
                for j in 0..m.ncols() {
                    for i in 0..t {
                        let diag = if i == 0 || i == t - 1 { 1.0 } else { 1.0 + phi * phi };
                        let mut v = diag * m[(i, j)];
                        if i > 0 {
                            v -= phi * m[(i - 1, j)];
                        }
                        if i + 1 < t {
                            v -= phi * m[(i + 1, j)];
                        }
                        out[(i, j)] = c * v;
                    }
                }
                out
            }
        }
    }
}

/// Fitted quantities for one cluster.
#[derive(Clone, Debug)]
pub struct ClusterBlock {
    pub key: ClusterKey,
    pub rows: Range<usize>,
    /// Bernoulli variances `p(1 − p)`, the diagonal of `A`.
    pub variance: Vec<f64>,
    /// Pearson residuals `(y − p) / √(p(1 − p))`.
    pub residuals: Vec<f64>,
}

pub fn cluster_blocks(frame: &ModelFrame, beta: &DVector<f64>) -> Result<Vec<ClusterBlock>> {
    let eta = &frame.design * beta;
    frame
        .clusters
        .iter()
        .map(|c| {
            let mut variance = Vec::with_capacity(c.rows.len());
            let mut residuals = Vec::with_capacity(c.rows.len());
            for r in c.rows.clone() {
                let p = inv_logit(eta[r]);
                let v = p * (1.0 - p);
                if !(v > 1e-300) {
                    return Err(Error::SingularCluster(c.key.to_string()));
                }
                variance.push(v);
                residuals.push((frame.response[r] - p) / v.sqrt());
            }
            Ok(ClusterBlock {
                key: c.key.clone(),
                rows: c.rows.clone(),
                variance,
                residuals,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiEstimate {
    pub value: f64,
    pub raw: f64,
    pub clamped: bool,
}

/// Lag-1 moment estimator: `Σ Σ_{t≥2} r_t r_{t−1} / Σ (T − 1)`, clamped to
/// `(−0.999, 0.999)`.
pub fn estimate_phi_ar1(blocks: &[ClusterBlock]) -> Result<PhiEstimate> {
    let mut num = 0.0;
    let mut den = 0usize;
    for b in blocks {
        num += b.residuals.windows(2).map(|w| w[0] * w[1]).sum::<f64>();
        den += b.residuals.len().saturating_sub(1);
    }
    if den == 0 {
        return Err(Error::Undefined(
            "every cluster has length 1; lag-1 correlation has no pairs".into(),
        ));
    }
    let raw = num / den as f64;
    let value = raw.clamp(-PHI_CLAMP, PHI_CLAMP);
    let clamped = value != raw;
    if clamped {
        log::warn!("moment estimate of phi ({raw:.4}) clamped to {value}");
    }
    Ok(PhiEstimate { value, raw, clamped })
}

/// Scale estimate `Σ r² / (N − q)`.
pub fn estimate_scale(blocks: &[ClusterBlock], q: usize) -> Result<f64> {
    let n: usize = blocks.iter().map(|b| b.residuals.len()).sum();
    if n <= q {
        return Err(Error::DegreesOfFreedom { n, q });
    }
    let ss: f64 = blocks.iter().flat_map(|b| &b.residuals).map(|r| r * r).sum();
    Ok(ss / (n - q) as f64)
}

/// Derivative matrix, working covariance and raw residual of one cluster.
#[derive(Clone, Debug)]
pub struct ClusterMoments {
    pub d: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub residual: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct Sandwich {
    pub covariance: DMatrix<f64>,
    pub bread: DMatrix<f64>,
    pub meat: DMatrix<f64>,
    /// Fewer clusters than parameters, so `M` cannot have full rank.
    pub meat_rank_deficient: bool,
}

/// `B⁻¹ M B⁻¹` with `B = Σ DᵀV⁻¹D` and `M = Σ DᵀV⁻¹(y−p)(y−p)ᵀV⁻¹D`.
pub fn sandwich_covariance(clusters: &[ClusterMoments]) -> Result<Sandwich> {
    let middles: Vec<DMatrix<f64>> = clusters.iter().map(|c| &c.residual * c.residual.transpose()).collect();
    sandwich_covariance_with(clusters, &middles)
}

/// Sandwich with an arbitrary per-cluster middle matrix in place of the
/// residual outer product.
pub fn sandwich_covariance_with(clusters: &[ClusterMoments], middles: &[DMatrix<f64>]) -> Result<Sandwich> {
    let first = clusters
        .first()
        .ok_or_else(|| Error::EmptyInput("no clusters for the sandwich estimator".into()))?;
    let q = first.d.ncols();
    let mut bread = DMatrix::<f64>::zeros(q, q);
    let mut meat = DMatrix::<f64>::zeros(q, q);
    for (c, mid) in clusters.iter().zip(middles) {
        let chol = linalg::cholesky(&c.v, "cluster working covariance")?;
        let vinv_d = chol.solve(&c.d);
        bread += c.d.tr_mul(&vinv_d);
        meat += vinv_d.tr_mul(mid) * &vinv_d;
    }
    finish_sandwich(bread, meat, clusters.len())
}

fn finish_sandwich(bread: DMatrix<f64>, meat: DMatrix<f64>, n_clusters: usize) -> Result<Sandwich> {
    let q = bread.nrows();
    let bread = linalg::symmetrize(&bread);
    let meat = linalg::symmetrize(&meat);
    let binv = linalg::spd_inverse(&bread, "sandwich bread B")?;
    let covariance = linalg::symmetrize(&(&binv * &meat * &binv));
    let meat_rank_deficient = n_clusters < q;
    if meat_rank_deficient {
        log::warn!("sandwich meat from {n_clusters} cluster(s) has rank below q = {q}");
    }
    Ok(Sandwich {
        covariance,
        bread,
        meat,
        meat_rank_deficient,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeeOptions {
    pub max_iter: usize,
    pub tolerance: f64,
}

impl Default for GeeOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tolerance: 1e-8,
        }
    }
}

pub fn gee_fit(frame: &ModelFrame, spec: &WorkingCorrelation) -> Result<FitResult> {
    gee_fit_with(frame, spec, GeeOptions::default())
}

struct Accumulated {
    bread: DMatrix<f64>,
    score: DVector<f64>,
    meat: DMatrix<f64>,
}

fn accumulate(
    frame: &ModelFrame,
    blocks: &[ClusterBlock],
    inverses: &HashMap<usize, CorrelationInverse>,
    alpha: f64,
) -> Accumulated {
    let q = frame.n_cols();
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = blocks
        .par_iter()
        .map(|b| {
            let t = b.residuals.len();
            // G = A^½ X, so DᵀV⁻¹D = GᵀR⁻¹G / α and DᵀV⁻¹(y − p) = GᵀR⁻¹r / α.
            let mut g = frame.design.rows(b.rows.start, t).into_owned();
            for (i, v) in b.variance.iter().enumerate() {
                let s = v.sqrt();
                g.row_mut(i).scale_mut(s);
            }
            let rinv = &inverses[&t];
            let rinv_g = rinv.apply(&g);
            let resid = DMatrix::from_column_slice(t, 1, &b.residuals);
            let bread = g.tr_mul(&rinv_g) / alpha;
            let score = rinv_g.tr_mul(&resid).column(0).into_owned() / alpha;
            (bread, score)
        })
        .collect();
    let mut acc = Accumulated {
        bread: DMatrix::zeros(q, q),
        score: DVector::zeros(q),
        meat: DMatrix::zeros(q, q),
    };
    for (b, s) in parts {
        acc.bread += b;
        acc.meat += &s * s.transpose();
        acc.score += s;
    }
    acc
}

fn inverses_for(frame: &ModelFrame, spec: &WorkingCorrelation) -> Result<HashMap<usize, CorrelationInverse>> {
    let mut out = HashMap::new();
    for c in &frame.clusters {
        let t = c.rows.len();
        if let std::collections::hash_map::Entry::Vacant(e) = out.entry(t) {
            e.insert(CorrelationInverse::new(spec, t)?);
        }
    }
    Ok(out)
}

pub fn gee_fit_with(frame: &ModelFrame, spec: &WorkingCorrelation, opts: GeeOptions) -> Result<FitResult> {
    spec.validate()?;
    let q = frame.n_cols();
    let start = fit_irls(frame)?;
    let mut beta = DVector::from_vec(start.coefficients.clone());
    let mut working = *spec;
    let estimate = spec.estimate_phi && spec.kind == CorrelationKind::Ar1;
    let mut inverses = inverses_for(frame, &working)?;
    let mut phi_est: Option<PhiEstimate> = None;

    let mut iterations = 0;
    loop {
        let blocks = cluster_blocks(frame, &beta)?;
        if estimate {
            let est = estimate_phi_ar1(&blocks)?;
            if est.value != working.phi {
                working.phi = est.value;
                inverses = inverses_for(frame, &working)?;
            }
            phi_est = Some(est);
        }
        let alpha = estimate_scale(&blocks, q)?;
        let acc = accumulate(frame, &blocks, &inverses, alpha);
        let gnorm = max_abs(&acc.score);
        if gnorm < opts.tolerance {
            return finish_fit(
                frame, spec, &working, beta, &blocks, alpha, acc, phi_est, iterations, gnorm,
            );
        }
        if iterations == opts.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                detail: format!(
                    "quasi-score max-norm {gnorm:.3e} at beta = {:?}",
                    beta.iter().collect::<Vec<_>>()
                ),
            });
        }
        iterations += 1;
        let delta = linalg::cholesky(&acc.bread, "GEE information B")?.solve(&acc.score);
        beta += delta;
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonConvergence {
                iterations,
                detail: "coefficients became non-finite".into(),
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_fit(
    frame: &ModelFrame,
    spec: &WorkingCorrelation,
    working: &WorkingCorrelation,
    beta: DVector<f64>,
    blocks: &[ClusterBlock],
    alpha: f64,
    acc: Accumulated,
    phi_est: Option<PhiEstimate>,
    iterations: usize,
    gnorm: f64,
) -> Result<FitResult> {
    let sandwich = finish_sandwich(acc.bread, acc.meat, blocks.len())?;
    let correlation = match spec.kind {
        CorrelationKind::Independence => None,
        CorrelationKind::Ar1 => {
            let moment = match phi_est {
                Some(e) => Some(e),
                None => estimate_phi_ar1(blocks).ok(),
            };
            Some(CorrelationReport {
                value: working.phi,
                moment_estimate: moment.map(|m| m.value),
                estimated: spec.estimate_phi,
                clamped: phi_est.is_some_and(|e| e.clamped),
            })
        }
        CorrelationKind::ToeplitzBand => Some(CorrelationReport {
            value: working.phi,
            moment_estimate: None,
            estimated: false,
            clamped: false,
        }),
    };
    Ok(FitResult {
        names: frame.column_names.clone(),
        coefficients: beta.iter().copied().collect(),
        covariance_model: linalg::spd_inverse(&sandwich.bread, "GEE information B")?,
        covariance_robust: Some(sandwich.covariance),
        dispersion: Some(alpha),
        correlation,
        variance_components: None,
        log_likelihood: None,
        iterations,
        converged: true,
        gradient_norm: gnorm,
    })
}

/// Dense per-cluster `D`, `V` and residuals at a fitted GEE solution.
pub fn cluster_moments(frame: &ModelFrame, fit: &FitResult, spec: &WorkingCorrelation) -> Result<Vec<ClusterMoments>> {
    let beta = DVector::from_vec(fit.coefficients.clone());
    let mut working = *spec;
    if let Some(c) = &fit.correlation {
        working.phi = c.value;
    }
    let alpha = fit.dispersion.unwrap_or(1.0);
    let blocks = cluster_blocks(frame, &beta)?;
    blocks
        .iter()
        .map(|b| {
            let t = b.variance.len();
            let r = build_correlation(&working, t)?.matrix;
            let sd = DVector::from_iterator(t, b.variance.iter().map(|v| v.sqrt()));
            let v = DMatrix::from_fn(t, t, |i, j| alpha * sd[i] * r[(i, j)] * sd[j]);
            let mut d = frame.design.rows(b.rows.start, t).into_owned();
            for (i, w) in b.variance.iter().enumerate() {
                d.row_mut(i).scale_mut(*w);
            }
            // y − p recovered from the Pearson residual
            let residual = DVector::from_iterator(t, b.variance.iter().zip(&b.residuals).map(|(v, r)| r * v.sqrt()));
            Ok(ClusterMoments { d, v, residual })
        })
        .collect()
}
