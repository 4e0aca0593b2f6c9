//! Stratified Cox regression on (start, stop] episode records.
//!
//! Each stratum (transition direction) has its own baseline hazard; the
//! partial likelihood uses counting-process risk sets and Efron or Breslow
//! handling of tied event times. Robust covariance aggregates score
//! residuals within subject-item clusters.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ClusterKey;
use crate::linalg::{self, max_abs};

/// Direction of the transition that ends an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// 1→0: leaving the target.
    FromTarget,
    /// 0→1: entering the target.
    ToTarget,
}

impl Transition {
    pub fn label(self) -> &'static str {
        match self {
            Self::FromTarget => "1->0",
            Self::ToTarget => "0->1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub start: f64,
    pub stop: f64,
    pub event: u8,
    pub stratum: Transition,
    pub covariates: Vec<f64>,
    pub cluster_key: ClusterKey,
}

/// Survival records sharing one covariate layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalData {
    pub names: Vec<String>,
    pub records: Vec<SurvivalRecord>,
}

impl SurvivalData {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::EmptyInput("no survival records".into()));
        }
        let p = self.names.len();
        for (i, r) in self.records.iter().enumerate() {
            if !(r.start < r.stop) || r.event > 1 || r.covariates.len() != p {
                return Err(Error::Structure(format!(
                    "survival record {i} is invalid (start {}, stop {}, event {}, {} covariates)",
                    r.start,
                    r.stop,
                    r.event,
                    r.covariates.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ties {
    #[default]
    Efron,
    Breslow,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoxOptions {
    pub ties: Ties,
    pub max_iter: usize,
    pub tolerance: f64,
    pub divergence_limit: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            ties: Ties::Efron,
            max_iter: 50,
            tolerance: 1e-8,
            divergence_limit: 15.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HazardFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub covariance_model: DMatrix<f64>,
    pub covariance_robust: DMatrix<f64>,
    pub n_events: BTreeMap<Transition, usize>,
    pub log_partial_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

impl HazardFit {
    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn coef(&self, name: &str) -> Result<f64> {
        Ok(self.coefficients[self.index(name)?])
    }

    pub fn robust_se(&self, name: &str) -> Result<f64> {
        let j = self.index(name)?;
        Ok(self.covariance_robust[(j, j)].max(0.0).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TotalEffect {
    pub estimate: f64,
    pub robust_se: f64,
}

/// Sum of a main effect and its transition interaction, with robust SE
/// `√(var_main + var_int + 2 cov)`.
pub fn total_effect(fit: &HazardFit, main: &str, interaction: &str) -> Result<TotalEffect> {
    let i = fit.index(main)?;
    let j = fit.index(interaction)?;
    let v = &fit.covariance_robust;
    Ok(TotalEffect {
        estimate: fit.coefficients[i] + fit.coefficients[j],
        robust_se: (v[(i, i)] + v[(j, j)] + 2.0 * v[(i, j)]).max(0.0).sqrt(),
    })
}

/// Risk-set bookkeeping for one distinct event time of one stratum.
struct EventTime {
    time: f64,
    events: Vec<usize>,
    /// Σ_k 1/S0_k and Σ_k x̄_k/S0_k
    a: f64,
    b: DVector<f64>,
    /// Same sums weighted by (1 − frac_k), used for the tied events themselves.
    a_event: f64,
    b_event: DVector<f64>,
    /// Average of x̄_k over the tied events.
    xbar_mean: DVector<f64>,
}

struct StratumPass {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
    /// Ascending by time.
    times: Vec<EventTime>,
    members: Vec<usize>,
}

fn stratum_pass(data: &SurvivalData, members: Vec<usize>, risk: &[f64], ties: Ties) -> StratumPass {
    let p = data.names.len();
    let recs = &data.records;
    let mut by_stop = members.clone();
    by_stop.sort_by(|&a, &b| recs[b].stop.total_cmp(&recs[a].stop).then(a.cmp(&b)));
    let mut by_start = members.clone();
    by_start.sort_by(|&a, &b| recs[b].start.total_cmp(&recs[a].start).then(a.cmp(&b)));

    // distinct event times, descending, with their event records
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for &i in &by_stop {
        if recs[i].event == 1 {
            match groups.last_mut() {
                Some((t, v)) if *t == recs[i].stop => v.push(i),
                _ => groups.push((recs[i].stop, vec![i])),
            }
        }
    }

    let mut s0 = 0.0;
    let mut s1 = DVector::<f64>::zeros(p);
    let mut s2 = DMatrix::<f64>::zeros(p, p);
    let (mut ip, mut is) = (0, 0);
    let mut loglik = 0.0;
    let mut score = DVector::<f64>::zeros(p);
    let mut info = DMatrix::<f64>::zeros(p, p);
    let mut times = Vec::with_capacity(groups.len());

    for (t, events) in groups {
        while ip < by_stop.len() && recs[by_stop[ip]].stop >= t {
            let i = by_stop[ip];
            let x = DVector::from_column_slice(&recs[i].covariates);
            s0 += risk[i];
            s1.axpy(risk[i], &x, 1.0);
            s2.ger(risk[i], &x, &x, 1.0);
            ip += 1;
        }
        while is < by_start.len() && recs[by_start[is]].start >= t {
            let i = by_start[is];
            let x = DVector::from_column_slice(&recs[i].covariates);
            s0 -= risk[i];
            s1.axpy(-risk[i], &x, 1.0);
            s2.ger(-risk[i], &x, &x, 1.0);
            is += 1;
        }
        let d = events.len();
        let mut e0 = 0.0;
        let mut e1 = DVector::<f64>::zeros(p);
        let mut e2 = DMatrix::<f64>::zeros(p, p);
        for &i in &events {
            let x = DVector::from_column_slice(&recs[i].covariates);
            loglik += risk[i].ln();
            score += &x;
            e0 += risk[i];
            e1.axpy(risk[i], &x, 1.0);
            e2.ger(risk[i], &x, &x, 1.0);
        }
        let mut a = 0.0;
        let mut b = DVector::<f64>::zeros(p);
        let mut a_event = 0.0;
        let mut b_event = DVector::<f64>::zeros(p);
        let mut xbar_mean = DVector::<f64>::zeros(p);
        for k in 0..d {
            let frac = match ties {
                Ties::Efron => k as f64 / d as f64,
                Ties::Breslow => 0.0,
            };
            let s0k = s0 - frac * e0;
            let s1k = &s1 - &e1 * frac;
            let s2k = &s2 - &e2 * frac;
            let xbar = &s1k / s0k;
            loglik -= s0k.ln();
            score -= &xbar;
            info += &s2k / s0k - &xbar * xbar.transpose();
            a += 1.0 / s0k;
            b.axpy(1.0 / s0k, &xbar, 1.0);
            a_event += (1.0 - frac) / s0k;
            b_event.axpy((1.0 - frac) / s0k, &xbar, 1.0);
            xbar_mean.axpy(1.0 / d as f64, &xbar, 1.0);
        }
        times.push(EventTime {
            time: t,
            events,
            a,
            b,
            a_event,
            b_event,
            xbar_mean,
        });
    }
    times.reverse();
    StratumPass {
        loglik,
        score,
        info,
        times,
        members,
    }
}

fn strata(data: &SurvivalData) -> BTreeMap<Transition, Vec<usize>> {
    let mut out: BTreeMap<Transition, Vec<usize>> = BTreeMap::new();
    for (i, r) in data.records.iter().enumerate() {
        out.entry(r.stratum).or_default().push(i);
    }
    out
}

fn risk_scores(data: &SurvivalData, beta: &DVector<f64>) -> Vec<f64> {
    data.records
        .iter()
        .map(|r| {
            r.covariates
                .iter()
                .zip(beta.iter())
                .map(|(x, b)| x * b)
                .sum::<f64>()
                .exp()
        })
        .collect()
}

fn passes(data: &SurvivalData, beta: &DVector<f64>, ties: Ties) -> Vec<StratumPass> {
    let risk = risk_scores(data, beta);
    strata(data)
        .into_values()
        .map(|members| stratum_pass(data, members, &risk, ties))
        .collect()
}

/// Stratified log partial likelihood, score and observed information.
pub fn partial_likelihood(data: &SurvivalData, beta: &DVector<f64>, ties: Ties) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = data.names.len();
    let mut ll = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for s in passes(data, beta, ties) {
        ll += s.loglik;
        score += s.score;
        info += s.info;
    }
    (ll, score, linalg::symmetrize(&info))
}

pub fn log_partial_likelihood(data: &SurvivalData, beta: &DVector<f64>, ties: Ties) -> f64 {
    partial_likelihood(data, beta, ties).0
}

/// Per-record score residuals; they sum to the score vector.
pub fn score_residuals(data: &SurvivalData, beta: &DVector<f64>, ties: Ties) -> Vec<DVector<f64>> {
    let p = data.names.len();
    let risk = risk_scores(data, beta);
    let mut out = vec![DVector::<f64>::zeros(p); data.records.len()];
    for members in strata(data).into_values() {
        let pass = stratum_pass(data, members, &risk, ties);
        let m = pass.times.len();
        let mut cum_a = vec![0.0; m + 1];
        let mut cum_b = vec![DVector::<f64>::zeros(p); m + 1];
        for (k, et) in pass.times.iter().enumerate() {
            cum_a[k + 1] = cum_a[k] + et.a;
            cum_b[k + 1] = &cum_b[k] + &et.b;
        }
        for &i in &pass.members {
            let rec = &data.records[i];
            let x = DVector::from_column_slice(&rec.covariates);
            let lo = pass.times.partition_point(|et| et.time <= rec.start);
            let hi = pass.times.partition_point(|et| et.time <= rec.stop);
            let a = cum_a[hi] - cum_a[lo];
            let b = &cum_b[hi] - &cum_b[lo];
            let mut u = (&b - &x * a) * risk[i];
            if rec.event == 1 && hi > lo {
                let et = &pass.times[hi - 1];
                debug_assert!(et.events.contains(&i));
                // replace the generic at-risk term at the record's own event time
                u += (&x * et.a - &et.b) * risk[i];
                u += &x - &et.xbar_mean - (&x * et.a_event - &et.b_event) * risk[i];
            }
            out[i] = u;
        }
    }
    out
}

/// `I⁻¹ (Σ_c U_c U_cᵀ) I⁻¹` with `U_c` the summed score residuals of
/// cluster `c`.
pub fn robust_covariance(
    data: &SurvivalData,
    beta: &DVector<f64>,
    info_inverse: &DMatrix<f64>,
    ties: Ties,
    cluster_of: impl Fn(usize, &SurvivalRecord) -> ClusterKey,
) -> DMatrix<f64> {
    let p = data.names.len();
    let resid = score_residuals(data, beta, ties);
    let mut sums: BTreeMap<ClusterKey, DVector<f64>> = BTreeMap::new();
    for (i, (r, u)) in data.records.iter().zip(resid).enumerate() {
        *sums.entry(cluster_of(i, r)).or_insert_with(|| DVector::zeros(p)) += u;
    }
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for u in sums.values() {
        meat.ger(1.0, u, u, 1.0);
    }
    linalg::symmetrize(&(info_inverse * meat * info_inverse))
}

pub fn fit_cox(data: &SurvivalData) -> Result<HazardFit> {
    fit_cox_with(data, CoxOptions::default())
}

pub fn fit_cox_with(data: &SurvivalData, opts: CoxOptions) -> Result<HazardFit> {
    data.validate()?;
    let p = data.names.len();
    let mut n_events = BTreeMap::new();
    for (stratum, members) in strata(data) {
        let events = members.iter().filter(|&&i| data.records[i].event == 1).count();
        if events == 0 {
            return Err(Error::EmptyStratum(stratum.label().into()));
        }
        n_events.insert(stratum, events);
    }

    let mut beta = DVector::<f64>::zeros(p);
    let (mut ll, mut score, mut info) = partial_likelihood(data, &beta, opts.ties);
    let mut iterations = 0;
    while max_abs(&score) >= opts.tolerance {
        if iterations == opts.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                detail: format!("partial-likelihood score max-norm {:.3e}", max_abs(&score)),
            });
        }
        iterations += 1;
        let delta = linalg::cholesky(&info, "Cox information matrix")?.solve(&score);
        let mut step = 1.0;
        loop {
            let cand = &beta + &delta * step;
            let (cll, cs, ci) = partial_likelihood(data, &cand, opts.ties);
            if cll >= ll - 1e-12 * ll.abs() || step < 1e-6 {
                beta = cand;
                (ll, score, info) = (cll, cs, ci);
                break;
            }
            step *= 0.5;
        }
        if let Some(j) = beta.iter().position(|b| b.abs() > opts.divergence_limit) {
            return Err(Error::Divergence {
                column: data.names[j].clone(),
                limit: opts.divergence_limit,
            });
        }
    }
    let info_inv = linalg::spd_inverse(&info, "Cox information matrix")?;
    let robust = robust_covariance(data, &beta, &info_inv, opts.ties, |_, r| r.cluster_key.clone());
    Ok(HazardFit {
        names: data.names.clone(),
        coefficients: beta.iter().copied().collect(),
        covariance_model: info_inv,
        covariance_robust: robust,
        n_events,
        log_partial_likelihood: ll,
        iterations,
        converged: true,
        gradient_norm: max_abs(&score),
    })
}
