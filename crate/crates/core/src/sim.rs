//! Synthetic gaze data with known ground truth.
//!
//! Two discrete-time mechanisms produce binary series on a fixed time grid:
//!
//! * `two_state_markov`: the series switches state with a per-bin
//!   probability that depends on the current state and on the covariates.
//! * `latent_ar1`: a stationary Gaussian AR(1) path is thresholded so that
//!   the on-target probability at each bin follows the logistic mean model.
//!
//! A continuous-time generator of alternating exponential dwell episodes
//! serves the survival models.
//!
//! Random numbers come from ChaCha20 (`rand_chacha`). Subject and item
//! effects use stream 0 of the seed; the trial for subject `s` and item `i`
//! uses stream `1 + s * n_items + i`, so output does not depend on how the
//! trials are scheduled across threads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cox::{SurvivalData, SurvivalRecord, Transition};
use crate::design;
use crate::error::{Error, Result};
use crate::ingest::{ClusterKey, Conditions, TrialSeries, DEFAULT_BIN_SECONDS};
use crate::linalg::inv_logit;
use crate::rle::{rle_encode, COX_COVARIATES};

const PAPER_LIKE: &str = include_str!("../presets/paper_like.toml");
const PAPER_SCALE: &str = include_str!("../presets/paper_scale.toml");

/// Names accepted by [`SimConfig::preset`].
pub const PRESETS: [&str; 2] = ["paper-like", "paper-scale"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    TwoStateMarkov,
    LatentAr1,
}

/// Per-bin switching probability out of one state. `probability` applies
/// to the reference condition at time 0; the other fields shift its
/// log-odds. Probabilities of exactly 0 or 1 are absorbing and ignore the
/// shifts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchRate {
    pub probability: f64,
    #[serde(default)]
    pub contrast: f64,
    #[serde(default)]
    pub privileged: f64,
    #[serde(default)]
    pub time: f64,
}

impl SwitchRate {
    fn at(&self, c: Conditions, time: f64, shift: f64) -> f64 {
        if self.probability <= 0.0 {
            return 0.0;
        }
        if self.probability >= 1.0 {
            return 1.0;
        }
        let logit = (self.probability / (1.0 - self.probability)).ln()
            + self.contrast * f64::from(c.contrast)
            + self.privileged * f64::from(c.privileged)
            + self.time * time
            + shift;
        inv_logit(logit)
    }
}

fn default_length() -> usize {
    112
}

fn default_bin() -> f64 {
    DEFAULT_BIN_SECONDS
}

fn default_half() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub n_items: usize,
    #[serde(default = "default_length")]
    pub series_length: usize,
    #[serde(default = "default_bin")]
    pub bin_seconds: f64,
    pub mechanism: Mechanism,
    /// Logistic mean-model coefficients by design column name
    /// (`latent_ar1`); unnamed columns are 0.
    #[serde(default)]
    pub true_beta: BTreeMap<String, f64>,
    /// Switch out of state 0 (`two_state_markov`).
    #[serde(default)]
    pub enter: SwitchRate,
    /// Switch out of state 1 (`two_state_markov`).
    #[serde(default)]
    pub leave: SwitchRate,
    /// Probability that a Markov series starts on target.
    #[serde(default = "default_half")]
    pub initial_on_target: f64,
    /// Autocorrelation of the latent Gaussian path (`latent_ar1`).
    #[serde(default)]
    pub latent_phi: f64,
    #[serde(default)]
    pub sigma_u2: f64,
    #[serde(default)]
    pub sigma_v2: f64,
    pub seed: u64,
}

fn config_error(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_error("toml", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-like" => Self::from_toml(PAPER_LIKE),
            "paper-scale" => Self::from_toml(PAPER_SCALE),
            other => Err(Error::Lookup(format!(
                "unknown preset `{other}` (available: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(config_error("n_subjects", "must be at least 1"));
        }
        if self.n_items == 0 {
            return Err(config_error("n_items", "must be at least 1"));
        }
        if self.series_length == 0 {
            return Err(config_error("series_length", "must be at least 1"));
        }
        if !(self.bin_seconds > 0.0 && self.bin_seconds.is_finite()) {
            return Err(config_error("bin_seconds", "must be positive"));
        }
        for (field, p) in [
            ("enter.probability", self.enter.probability),
            ("leave.probability", self.leave.probability),
            ("initial_on_target", self.initial_on_target),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_error(field, format!("probability {p} is outside [0, 1]")));
            }
        }
        if !(self.latent_phi.abs() < 1.0) {
            return Err(config_error(
                "latent_phi",
                format!("{} must lie strictly inside (-1, 1)", self.latent_phi),
            ));
        }
        for (field, v) in [("sigma_u2", self.sigma_u2), ("sigma_v2", self.sigma_v2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_error(field, format!("variance {v} must be nonnegative")));
            }
        }
        let known = design::column_names(false);
        for (name, v) in &self.true_beta {
            if !known.contains(name) {
                return Err(config_error(
                    &format!("true_beta.{name}"),
                    format!("unknown coefficient (expected one of {})", known.join(", ")),
                ));
            }
            if !v.is_finite() {
                return Err(config_error(&format!("true_beta.{name}"), "must be finite"));
            }
        }
        Ok(())
    }

    /// Mean-model coefficients in design-column order.
    pub fn beta_vector(&self) -> Vec<f64> {
        design::column_names(false)
            .iter()
            .map(|n| self.true_beta.get(n).copied().unwrap_or(0.0))
            .collect()
    }
}

/// Conditions of item `j`: contrast alternates fastest, privileged next.
pub fn item_conditions(j: usize) -> Conditions {
    Conditions {
        contrast: (j % 2) as u8,
        privileged: ((j / 2) % 2) as u8,
    }
}

pub fn subject_id(s: usize) -> String {
    format!("S{s:03}")
}

pub fn item_id(i: usize) -> String {
    format!("I{i:03}")
}

/// Known quantities behind a simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SimConfig,
    pub coefficient_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub subject_effects: Vec<f64>,
    pub item_effects: Vec<f64>,
    pub n_series: usize,
    pub n_samples: usize,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub series: Vec<TrialSeries>,
    pub truth: GroundTruth,
}

fn trial_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_effects(rng: &mut ChaCha20Rng, n: usize, variance: f64) -> Vec<f64> {
    let sd = variance.sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

fn unit_time(t: usize, len: usize) -> f64 {
    if len > 1 {
        t as f64 / (len - 1) as f64
    } else {
        0.0
    }
}

fn markov_series(cfg: &SimConfig, c: Conditions, shift: f64, rng: &mut ChaCha20Rng) -> Vec<u8> {
    let len = cfg.series_length;
    let mut out = Vec::with_capacity(len);
    let mut state = u8::from(rng.random::<f64>() < cfg.initial_on_target);
    out.push(state);
    for t in 1..len {
        let time = unit_time(t, len);
        let p = if state == 0 {
            cfg.enter.at(c, time, shift)
        } else {
            cfg.leave.at(c, time, -shift)
        };
        if rng.random::<f64>() < p {
            state = 1 - state;
        }
        out.push(state);
    }
    out
}

fn latent_series(cfg: &SimConfig, beta: &[f64], c: Conditions, shift: f64, rng: &mut ChaCha20Rng) -> Vec<u8> {
    let len = cfg.series_length;
    let phi = cfg.latent_phi;
    let innovation_sd = (1.0 - phi * phi).sqrt();
    let normal = Normal::standard();
    let (ct, pv) = (f64::from(c.contrast), f64::from(c.privileged));
    let mut z: f64 = StandardNormal.sample(rng);
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 {
            let e: f64 = StandardNormal.sample(rng);
            z = phi * z + innovation_sd * e;
        }
        let tt = unit_time(t, len);
        let eta = beta[0] + beta[1] * ct + beta[2] * pv + beta[3] * tt + beta[4] * ct * tt + beta[5] * pv * tt + shift;
        let p = inv_logit(eta);
        let threshold = if p <= 0.0 {
            f64::NEG_INFINITY
        } else if p >= 1.0 {
            f64::INFINITY
        } else {
            normal.inverse_cdf(p)
        };
        out.push(u8::from(z <= threshold));
    }
    out
}

pub fn simulate(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let mut rng = trial_rng(config.seed, 0);
    let subject_effects = draw_effects(&mut rng, config.n_subjects, config.sigma_u2);
    let item_effects = draw_effects(&mut rng, config.n_items, config.sigma_v2);
    let beta = config.beta_vector();
    let n_items = config.n_items;
    let series: Vec<TrialSeries> = (0..config.n_subjects * n_items)
        .into_par_iter()
        .map(|k| {
            let (s, i) = (k / n_items, k % n_items);
            let mut rng = trial_rng(config.seed, 1 + k as u64);
            let c = item_conditions(i);
            let shift = subject_effects[s] + item_effects[i];
            let samples = match config.mechanism {
                Mechanism::TwoStateMarkov => markov_series(config, c, shift, &mut rng),
                Mechanism::LatentAr1 => latent_series(config, &beta, c, shift, &mut rng),
            };
            TrialSeries {
                key: ClusterKey::new(subject_id(s), item_id(i)),
                conditions: c,
                bin_seconds: config.bin_seconds,
                samples,
            }
        })
        .collect();
    let n_samples = series.iter().map(TrialSeries::len).sum();
    Ok(SimOutput {
        truth: GroundTruth {
            config: config.clone(),
            coefficient_names: design::column_names(false),
            coefficients: beta,
            subject_effects,
            item_effects,
            n_series: series.len(),
            n_samples,
        },
        series,
    })
}

/// Run-length statistics over every run of every series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub median: f64,
    pub mean: f64,
    pub count: usize,
}

pub fn summarize_runs(series: &[TrialSeries]) -> Result<RunSummary> {
    let mut lengths = Vec::new();
    for s in series {
        lengths.extend(rle_encode(s)?.iter().map(|r| r.length));
    }
    if lengths.is_empty() {
        return Err(Error::EmptyInput("no series to summarize".into()));
    }
    lengths.sort_unstable();
    let n = lengths.len();
    let median = if n % 2 == 1 {
        f64::from(lengths[n / 2])
    } else {
        0.5 * (f64::from(lengths[n / 2 - 1]) + f64::from(lengths[n / 2]))
    };
    let mean = lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / n as f64;
    Ok(RunSummary { median, mean, count: n })
}

/// Continuous-time alternating dwell process with exponential durations.
///
/// Each cluster starts in a random state and alternates until `horizon`;
/// the run in progress at the horizon is censored. The hazard of leaving
/// the current state is `base_rate · exp(xᵀβ)` with `x` the
/// (Privileged, Contrast) pair and β specific to the transition direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DwellConfig {
    pub min_episodes: usize,
    pub n_items: usize,
    pub horizon: f64,
    pub base_rate: f64,
    /// (Privileged, Contrast) log-hazard ratios for 1→0 transitions.
    pub from_target: [f64; 2],
    /// (Privileged, Contrast) log-hazard ratios for 0→1 transitions.
    pub to_target: [f64; 2],
    pub seed: u64,
}

impl Default for DwellConfig {
    fn default() -> Self {
        Self {
            min_episodes: 5000,
            n_items: 4,
            horizon: 1.12,
            base_rate: 3.0,
            from_target: [-0.3, 0.2],
            to_target: [0.5, -0.4],
            seed: 42,
        }
    }
}

impl DwellConfig {
    /// Coefficients in the survival covariate layout
    /// (main effects for 1→0, then the 0→1 differences).
    pub fn true_coefficients(&self) -> [f64; 4] {
        [
            self.from_target[0],
            self.from_target[1],
            self.to_target[0] - self.from_target[0],
            self.to_target[1] - self.from_target[1],
        ]
    }
}

/// Simulates dwell episodes cluster by cluster until at least
/// `min_episodes` records exist.
pub fn simulate_dwell_episodes(cfg: &DwellConfig) -> Result<SurvivalData> {
    if !(cfg.horizon > 0.0 && cfg.base_rate > 0.0) || cfg.n_items == 0 {
        return Err(config_error("dwell", "horizon, base_rate and n_items must be positive"));
    }
    let mut records = Vec::new();
    let mut cluster = 0usize;
    while records.len() < cfg.min_episodes {
        let (s, i) = (cluster / cfg.n_items, cluster % cfg.n_items);
        let mut rng = trial_rng(cfg.seed, 1 + cluster as u64);
        let c = item_conditions(i);
        let x = [f64::from(c.privileged), f64::from(c.contrast)];
        let key = ClusterKey::new(subject_id(s), item_id(i));
        let mut state = u8::from(rng.random::<f64>() < 0.5);
        let mut t = 0.0;
        loop {
            let b = if state == 1 { cfg.from_target } else { cfg.to_target };
            let rate = cfg.base_rate * (b[0] * x[0] + b[1] * x[1]).exp();
            let d: f64 = Exp::new(rate)
                .map_err(|e| Error::Domain(e.to_string()))?
                .sample(&mut rng);
            let stop = (t + d).min(cfg.horizon);
            let event = u8::from(t + d < cfg.horizon);
            let to = if state == 0 { 1.0 } else { 0.0 };
            records.push(SurvivalRecord {
                start: t,
                stop,
                event,
                stratum: if state == 1 {
                    Transition::FromTarget
                } else {
                    Transition::ToTarget
                },
                covariates: vec![x[0], x[1], x[0] * to, x[1] * to],
                cluster_key: key.clone(),
            });
            if event == 0 {
                break;
            }
            t += d;
            state = 1 - state;
        }
        cluster += 1;
    }
    Ok(SurvivalData {
        names: COX_COVARIATES.iter().map(|s| s.to_string()).collect(),
        records,
    })
}
