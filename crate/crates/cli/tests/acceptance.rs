//! Acceptance run: every criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use gazelab::cox::{
    fit_cox, log_partial_likelihood, partial_likelihood, total_effect, SurvivalData, SurvivalRecord, Ties, Transition,
};
use gazelab::design::{build_frame, FrameOptions, ModelFrame};
use gazelab::gee::{build_correlation, estimate_phi_ar1, gee_fit, ClusterBlock, WorkingCorrelation};
use gazelab::glm::fit_irls;
use gazelab::glmm::{fit_glmm_laplace, RandomEffectsSpec};
use gazelab::ingest::{apply_exclusions, load_long_format, ClusterKey, Conditions, Schema, TrialSeries};
use gazelab::report::{Cell, Table, METHOD_COLUMNS, TERM_ROWS, VARIANCE_COLUMNS, VARIANCE_ROWS};
use gazelab::rle::{rle_decode, rle_encode};
use gazelab::sim::{simulate, simulate_dwell_episodes, DwellConfig, Mechanism, SimConfig};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn named(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

const MARGINAL_BETA: [(&str, f64); 6] = [
    ("Intercept", -0.3),
    ("Contrast", 0.4),
    ("Privileged", 0.6),
    ("Time", 0.5),
    ("Contrast*Time", -0.3),
    ("Priv*Time", 0.2),
];

fn latent(n_subjects: usize, n_items: usize, len: usize, phi: f64, beta: &[(&str, f64)], seed: u64) -> SimConfig {
    SimConfig {
        n_subjects,
        n_items,
        series_length: len,
        bin_seconds: 0.01,
        mechanism: Mechanism::LatentAr1,
        true_beta: named(beta),
        enter: Default::default(),
        leave: Default::default(),
        initial_on_target: 0.5,
        latent_phi: phi,
        sigma_u2: 0.0,
        sigma_v2: 0.0,
        seed,
    }
}

fn frame(series: &[TrialSeries]) -> ModelFrame {
    build_frame(series, FrameOptions::default()).expect("frame")
}

// ---------------------------------------------------------------- 1

fn rle_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 0..10_000 {
        let len = rng.random_range(1..=500);
        let switch = rng.random_range(0.0..0.5);
        let mut state = u8::from(rng.random::<bool>());
        let samples: Vec<u8> = (0..len)
            .map(|_| {
                if rng.random::<f64>() < switch {
                    state = 1 - state;
                }
                state
            })
            .collect();
        let series = TrialSeries {
            key: ClusterKey::new(format!("S{k}"), "I1"),
            conditions: Conditions {
                contrast: (k % 2) as u8,
                privileged: (k / 2 % 2) as u8,
            },
            bin_seconds: 0.01,
            samples,
        };
        let runs = rle_encode(&series).map_err(|e| e.to_string())?;
        let back = rle_decode(&runs, 0.01).map_err(|e| e.to_string())?;
        if back != series {
            return Err(format!("series {k} does not round-trip"));
        }
    }
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/example_trial.csv");
    let records = load_long_format(&path, &Schema::default()).map_err(|e| e.to_string())?;
    let (series, _) = apply_exclusions(&records, 0.01).map_err(|e| e.to_string())?;
    let runs = rle_encode(&series[0]).map_err(|e| e.to_string())?;
    let got: Vec<(u8, u32, f64)> = runs.iter().map(|r| (r.state, r.length, r.stop_time)).collect();
    let expected = [(1, 3, 0.03), (0, 3, 0.06), (1, 4, 0.10)];
    let same = got.len() == 3
        && got
            .iter()
            .zip(expected)
            .all(|(g, e)| g.0 == e.0 && g.1 == e.1 && (g.2 - e.2).abs() < 1e-12);
    check(same, format!("10000 series round-trip; ten-sample example {got:?}"))
}

// ---------------------------------------------------------------- 2

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-12 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut out = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * out[k]).sum();
        out[r] = (b[r] - s) / a[r][r];
    }
    Some(out)
}

/// Newton-Raphson with backtracking, independent of the library's IRLS.
fn newton_oracle(x: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let p = x[0].len();
    let loglik = |b: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(row, &yi)| {
                let eta: f64 = row.iter().zip(b).map(|(a, c)| a * c).sum();
                yi * eta - (1.0 + eta.exp()).ln()
            })
            .sum()
    };
    let mut beta = vec![0.0; p];
    for _ in 0..200 {
        let mut g = vec![0.0; p];
        let mut h = vec![vec![0.0; p]; p];
        for (row, &yi) in x.iter().zip(y) {
            let eta: f64 = row.iter().zip(&beta).map(|(a, c)| a * c).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            for j in 0..p {
                g[j] += (yi - mu) * row[j];
                for k in 0..p {
                    h[j][k] += mu * (1.0 - mu) * row[j] * row[k];
                }
            }
        }
        let step = solve(h, g)?;
        let base = loglik(&beta);
        let mut t = 1.0;
        let mut next: Vec<f64>;
        loop {
            next = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            if loglik(&next) >= base - 1e-12 || t < 1e-8 {
                break;
            }
            t *= 0.5;
        }
        let moved = step.iter().map(|s| (t * s).abs()).fold(0.0, f64::max);
        beta = next;
        if beta.iter().any(|b| b.abs() > 30.0) {
            return None;
        }
        if moved < 1e-14 {
            return Some(beta);
        }
    }
    Some(beta)
}

fn raw_frame(x: &[Vec<f64>], y: &[f64]) -> ModelFrame {
    let p = x[0].len();
    let design = nalgebra::DMatrix::from_fn(x.len(), p, |i, j| x[i][j]);
    let names = (0..p).map(|j| format!("x{j}")).collect();
    let keys: Vec<_> = (0..x.len()).map(|i| ClusterKey::new(format!("s{i}"), "i")).collect();
    ModelFrame::from_parts(y.to_vec(), design, names, &keys).expect("frame")
}

fn small_datasets(count: usize) -> Vec<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut out = Vec::new();
    while out.len() < count {
        let n = rng.random_range(20..=40);
        let truth: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = vec![1.0];
            row.extend((0..3).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let eta: f64 = row.iter().zip(&truth).map(|(a, b)| a * b).sum();
            y.push(f64::from(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()))));
            x.push(row);
        }
        // datasets the oracle cannot fit (separation) are redrawn
        if let Some(oracle) = newton_oracle(&x, &y) {
            out.push((x, y, oracle));
        }
    }
    out
}

fn glm_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for (x, y, oracle) in small_datasets(25) {
        let fit = fit_irls(&raw_frame(&x, &y)).map_err(|e| e.to_string())?;
        for (a, b) in fit.coefficients.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    let mut worst_analytic: f64 = 0.0;
    for (ones, n, expected) in [(20, 40, 0.0), (30, 40, 3f64.ln())] {
        let x = vec![vec![1.0]; n];
        let y: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i < ones))).collect();
        let fit = fit_irls(&raw_frame(&x, &y)).map_err(|e| e.to_string())?;
        worst_analytic = worst_analytic.max((fit.coefficients[0] - expected).abs());
    }
    check(
        worst <= 1e-8 && worst_analytic <= 1e-10,
        format!("max |IRLS - oracle| {worst:.2e}; intercept-only error {worst_analytic:.2e}"),
    )
}

// ---------------------------------------------------------------- 3

fn gee_reduction() -> Outcome {
    let mut frames: Vec<(String, ModelFrame)> = small_datasets(25)
        .into_iter()
        .enumerate()
        .map(|(i, (x, y, _))| (format!("small {i}"), raw_frame(&x, &y)))
        .collect();
    let paper_like = SimConfig::preset("paper-like").map_err(|e| e.to_string())?;
    let sim = simulate(&paper_like).map_err(|e| e.to_string())?;
    frames.push(("paper-like".into(), frame(&sim.series)));
    let lat = simulate(&latent(15, 10, 112, 0.8, &MARGINAL_BETA, 3)).map_err(|e| e.to_string())?;
    frames.push(("latent".into(), frame(&lat.series)));
    let mut worst: f64 = 0.0;
    for (name, f) in &frames {
        let glm = fit_irls(f).map_err(|e| format!("{name}: {e}"))?;
        let gee = gee_fit(f, &WorkingCorrelation::independence()).map_err(|e| format!("{name}: {e}"))?;
        for (a, b) in glm.coefficients.iter().zip(&gee.coefficients) {
            worst = worst.max((a - b).abs());
        }
    }
    check(
        worst <= 1e-6,
        format!("{} datasets, max |GEE(ind) - GLM| {worst:.2e}", frames.len()),
    )
}

// ---------------------------------------------------------------- 4

fn gee_recovery() -> Outcome {
    let reps = 200u64;
    let truth: Vec<f64> = MARGINAL_BETA.iter().map(|p| p.1).collect();
    let spec = WorkingCorrelation::ar1_estimated(0.0);
    let fits: Vec<(Vec<f64>, Vec<f64>)> = (0..reps)
        .map(|r| {
            let sim = simulate(&latent(15, 10, 112, 0.8, &MARGINAL_BETA, 1000 + r)).map_err(|e| e.to_string())?;
            let fit = gee_fit(&frame(&sim.series), &spec).map_err(|e| format!("replication {r}: {e}"))?;
            let se = fit.names.iter().map(|n| fit.se(n).unwrap()).collect();
            Ok((fit.coefficients, se))
        })
        .collect::<Result<_, String>>()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (j, (name, b)) in MARGINAL_BETA.iter().enumerate() {
        let bias = fits.iter().map(|f| f.0[j]).sum::<f64>() / reps as f64 - b;
        let covered = fits
            .iter()
            .filter(|f| (f.0[j] - truth[j]).abs() <= 1.959964 * f.1[j])
            .count();
        let coverage = covered as f64 / reps as f64;
        ok &= bias.abs() < 0.05 && (0.90..=0.98).contains(&coverage);
        parts.push(format!("{name} bias {bias:+.4} cover {:.1}%", 100.0 * coverage));
    }
    check(ok, parts.join("; "))
}

// ---------------------------------------------------------------- 5

fn ridge_behavior() -> Outcome {
    let r = build_correlation(&WorkingCorrelation::ar1_fixed(0.95, 1e-5), 112).map_err(|e| e.to_string())?;
    let min_eig = r.matrix.symmetric_eigenvalues().min();
    // 152 x 38 latent data whose moment estimate of φ sits near 0.95.
    let sim = simulate(&latent(152, 38, 112, 0.997, &MARGINAL_BETA, 20140601)).map_err(|e| e.to_string())?;
    let f = frame(&sim.series);
    let fixed = gee_fit(&f, &WorkingCorrelation::ar1_fixed(0.95, 1e-5)).map_err(|e| e.to_string())?;
    let free = gee_fit(&f, &WorkingCorrelation::ar1_estimated(1e-5)).map_err(|e| e.to_string())?;
    let diff = fixed
        .coefficients
        .iter()
        .zip(&free.coefficients)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let phi = free.correlation.as_ref().map_or(f64::NAN, |c| c.value);
    check(
        min_eig >= 1e-5 && diff <= 0.005,
        format!("min eigenvalue {min_eig:.3e}; free phi {phi:.4}; max |fixed - free| {diff:.4}"),
    )
}

// ---------------------------------------------------------------- 6

fn block(residuals: Vec<f64>) -> ClusterBlock {
    ClusterBlock {
        key: ClusterKey::new("S", format!("I{}", residuals.len())),
        rows: 0..residuals.len(),
        variance: vec![0.25; residuals.len()],
        residuals,
    }
}

fn phi_estimator() -> Outcome {
    let constant = estimate_phi_ar1(&[block(vec![1.0; 112])]).map_err(|e| e.to_string())?;
    let alternating = estimate_phi_ar1(&[block((0..112).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect())])
        .map_err(|e| e.to_string())?;
    let hand = estimate_phi_ar1(&[block(vec![0.5, 0.2, -0.4]), block(vec![0.3, 0.6])]).map_err(|e| e.to_string())?;
    let hand_expected = (0.5 * 0.2 + 0.2 * -0.4 + 0.3 * 0.6) / 3.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise: Vec<ClusterBlock> = (0..100)
        .map(|_| block((0..112).map(|_| rng.sample(StandardNormal)).collect()))
        .collect();
    let white = estimate_phi_ar1(&noise).map_err(|e| e.to_string())?;
    let ok = constant.raw == 1.0
        && constant.value == 0.999
        && constant.clamped
        && alternating.raw == -1.0
        && alternating.value == -0.999
        && alternating.clamped
        && (hand.raw - hand_expected).abs() < 1e-15
        && !hand.clamped
        && white.value.abs() < 0.05;
    check(
        ok,
        format!(
            "constant {} -> {}; alternating {} -> {}; hand {:.6}; white noise {:.4}",
            constant.raw, constant.value, alternating.raw, alternating.value, hand.value, white.value
        ),
    )
}

// ---------------------------------------------------------------- 7

fn random_survival(rng: &mut ChaCha8Rng) -> SurvivalData {
    let n = rng.random_range(15..=40);
    let exp = Exp::new(1.0).unwrap();
    let records = (0..n)
        .map(|i| {
            let start = (rng.random::<f64>() * 5.0).round() / 10.0;
            let stop = start + 0.1 + (rng.sample::<f64, _>(exp) * 10.0).round() / 10.0;
            SurvivalRecord {
                start,
                stop,
                event: u8::from(rng.random::<f64>() < 0.8),
                stratum: if rng.random::<bool>() {
                    Transition::ToTarget
                } else {
                    Transition::FromTarget
                },
                covariates: (0..3).map(|_| rng.sample(StandardNormal)).collect(),
                cluster_key: ClusterKey::new(format!("S{}", i % 5), "I"),
            }
        })
        .collect();
    SurvivalData {
        names: vec!["a".into(), "b".into(), "c".into()],
        records,
    }
}

fn cox_correctness() -> Outcome {
    let four = SurvivalData {
        names: vec!["x".into()],
        records: (0..4)
            .map(|i| SurvivalRecord {
                start: 0.0,
                stop: 1.0 + i as f64,
                event: 1,
                stratum: Transition::ToTarget,
                covariates: vec![i as f64],
                cluster_key: ClusterKey::new("S", format!("I{i}")),
            })
            .collect(),
    };
    let null = log_partial_likelihood(&four, &DVector::zeros(1), Ties::Efron);
    let null_err = (null + 24f64.ln()).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let data = random_survival(&mut rng);
        let beta = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
        let (_, score, _) = partial_likelihood(&data, &beta, Ties::Efron);
        for j in 0..3 {
            let h = 1e-5;
            let (mut up, mut down) = (beta.clone(), beta.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (log_partial_likelihood(&data, &up, Ties::Efron)
                - log_partial_likelihood(&data, &down, Ties::Efron))
                / (2.0 * h);
            worst = worst.max((score[j] - fd).abs() / score[j].abs().max(1e-3));
        }
    }

    let cfg = DwellConfig::default();
    let data = simulate_dwell_episodes(&cfg).map_err(|e| e.to_string())?;
    let fit = fit_cox(&data).map_err(|e| e.to_string())?;
    let te = total_effect(&fit, "Privileged", "Privileged:to_target").map_err(|e| e.to_string())?;
    let recovered = (te.estimate - 0.5).abs() <= 0.05;
    check(
        null_err < 1e-12 && worst < 1e-6 && recovered,
        format!(
            "null loglik error {null_err:.1e}; max gradient rel error {worst:.2e}; \
             0->1 Privileged log-HR {:.4} (SE {:.4}) from {} episodes, truth 0.5",
            te.estimate,
            te.robust_se,
            data.records.len()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn total_effects() -> Outcome {
    let data = simulate_dwell_episodes(&DwellConfig {
        min_episodes: 2000,
        seed: 8,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let fit = fit_cox(&data).map_err(|e| e.to_string())?;
    let mut split = data.clone();
    split.names = vec!["P_from".into(), "C_from".into(), "P_to".into(), "C_to".into()];
    for r in &mut split.records {
        let to = f64::from(u8::from(r.stratum == Transition::ToTarget));
        let (p, c) = (r.covariates[0], r.covariates[1]);
        r.covariates = vec![p * (1.0 - to), c * (1.0 - to), p * to, c * to];
    }
    let refit = fit_cox(&split).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (main, int, col) in [
        ("Privileged", "Privileged:to_target", "P_to"),
        ("Contrast", "Contrast:to_target", "C_to"),
    ] {
        let te = total_effect(&fit, main, int).map_err(|e| e.to_string())?;
        worst = worst.max((te.estimate - refit.coef(col).unwrap()).abs());
        worst = worst.max((te.robust_se - refit.robust_se(col).unwrap()).abs());
    }
    check(
        worst <= 1e-6,
        format!("max |total effect - refit| over estimates and SEs {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 9

const GLMM_BETA: [(&str, f64); 4] = [
    ("Intercept", -0.3),
    ("Contrast", 0.5),
    ("Privileged", -0.4),
    ("Time", 0.6),
];

fn glmm_sanity() -> Outcome {
    let zero = simulate(&latent(40, 16, 112, 0.0, &GLMM_BETA, 20140601)).map_err(|e| e.to_string())?;
    let f = frame(&zero.series);
    let glm = fit_irls(&f).map_err(|e| e.to_string())?;
    let mixed = fit_glmm_laplace(&f, &RandomEffectsSpec::for_frame(&f, 0.1, 0.1)).map_err(|e| e.to_string())?;
    let vc = mixed.variance_components.clone().ok_or("no variance components")?;
    let within = glm
        .names
        .iter()
        .all(|n| (mixed.coef(n).unwrap() - glm.coef(n).unwrap()).abs() <= 2.0 * glm.se(n).unwrap());

    let reps = 20u64;
    let mut estimates = Vec::new();
    for r in 0..reps {
        let mut cfg = latent(200, 20, 50, 0.0, &GLMM_BETA, 500 + r);
        cfg.sigma_u2 = 1.0;
        cfg.sigma_v2 = 0.25;
        let sim = simulate(&cfg).map_err(|e| e.to_string())?;
        let f = frame(&sim.series);
        let fit = fit_glmm_laplace(&f, &RandomEffectsSpec::for_frame(&f, 0.5, 0.5))
            .map_err(|e| format!("replication {r}: {e}"))?;
        estimates.push(fit.variance_components.unwrap().subject);
    }
    let mean = estimates.iter().sum::<f64>() / reps as f64;
    check(
        vc.subject <= 0.01 && vc.item <= 0.01 && within && (mean - 1.0).abs() <= 0.15,
        format!(
            "zero truth: variances {:.2e}/{:.2e}, beta within 2 SE of GLM: {within}; \
             mean subject variance {mean:.4} over {reps} replications (truth 1)",
            vc.subject, vc.item
        ),
    )
}

// ---------------------------------------------------------------- 10

fn load_table(path: &Path) -> Result<Table, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    serde_json::from_value(doc["table"].clone()).map_err(|e| e.to_string())
}

fn is_value(c: Option<&Cell>) -> bool {
    matches!(c, Some(Cell::Value { .. }))
}

fn pipeline_shape() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let status = Command::new(env!("CARGO_BIN_EXE_gazelab"))
        .args(["compare", "--preset", "paper-like", "--output-dir"])
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!(
            "compare exited with {}: {}",
            status.status,
            String::from_utf8_lossy(&status.stderr)
        ));
    }
    let coef = load_table(&dir.path().join("coefficients.json"))?;
    let se = load_table(&dir.path().join("standard_errors.json"))?;
    let var = load_table(&dir.path().join("variance.json"))?;
    let mut problems = Vec::new();
    for (name, t) in [("coefficients", &coef), ("standard errors", &se)] {
        let rows: Vec<&str> = t.rows.iter().map(|r| r.label.as_str()).collect();
        if rows != TERM_ROWS || t.columns != METHOD_COLUMNS {
            problems.push(format!("{name}: rows {rows:?}, columns {:?}", t.columns));
            continue;
        }
        for term in TERM_ROWS {
            for col in METHOD_COLUMNS {
                let expected = match (term, col) {
                    ("Privileged" | "Contrast", "COX") => true,
                    (_, "COX") => false,
                    ("Ylag-1", "LAG") => true,
                    ("Ylag-1", _) => false,
                    _ => true,
                };
                if is_value(t.cell(term, col)) != expected {
                    problems.push(format!("{name}: cell {term}/{col} is {:?}", t.cell(term, col)));
                }
            }
        }
    }
    let rows: Vec<&str> = var.rows.iter().map(|r| r.label.as_str()).collect();
    if rows != VARIANCE_ROWS || var.columns != VARIANCE_COLUMNS {
        problems.push(format!("variances: rows {rows:?}, columns {:?}", var.columns));
    } else {
        for model in ["GLM", "LAG"] {
            if !is_value(var.cell(model, "Subject variance")) || !is_value(var.cell(model, "Item variance")) {
                problems.push(format!("variances: {model} lacks variance components"));
            }
            if !matches!(var.cell(model, "phi"), Some(Cell::Missing))
                || !matches!(var.cell(model, "alpha"), Some(Cell::Missing))
            {
                problems.push(format!("variances: {model} has phi/alpha"));
            }
        }
        if !matches!(
            var.cell("AR1", "phi"),
            Some(Cell::WithEstimate { estimate: Some(_), .. })
        ) {
            problems.push("variances: AR1 phi lacks the free estimate".into());
        }
        if !matches!(var.cell("MA25", "phi"), Some(Cell::WithEstimate { estimate: None, .. })) {
            problems.push("variances: MA25 phi should be fixed only".into());
        }
        for model in ["AR1", "MA25"] {
            if !is_value(var.cell(model, "alpha")) {
                problems.push(format!("variances: {model} lacks alpha"));
            }
        }
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{} x {} term tables and {} x {} variance table",
                TERM_ROWS.len(),
                METHOD_COLUMNS.len(),
                VARIANCE_ROWS.len(),
                VARIANCE_COLUMNS.len()
            )
        } else {
            problems.join("; ")
        },
    )
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 10] = [
        ("1 RLE round-trip", rle_round_trip, Some(Duration::from_secs(5))),
        ("2 GLM oracle equivalence", glm_oracle, Some(Duration::from_secs(10))),
        ("3 GEE reduction", gee_reduction, None),
        (
            "4 GEE recovery and coverage",
            gee_recovery,
            Some(Duration::from_secs(300)),
        ),
        ("5 Ridge behavior", ridge_behavior, None),
        ("6 Phi moment estimator", phi_estimator, None),
        ("7 Cox correctness", cox_correctness, Some(Duration::from_secs(60))),
        ("8 Total effects", total_effects, None),
        ("9 GLMM sanity", glmm_sanity, Some(Duration::from_secs(600))),
        ("10 Pipeline shape parity", pipeline_shape, None),
    ];
    let mut failed = 0;
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let over = limit.is_some_and(|l| elapsed > l);
        let (ok, detail) = match outcome {
            Ok(d) if !over => (true, d),
            Ok(d) => (false, format!("{d}; exceeded {:?}", limit.unwrap())),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "[{}] {name} ({:.1} s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
