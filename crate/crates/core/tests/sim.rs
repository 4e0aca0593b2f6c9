use gazelab::ingest::{exclude_series, write_long_format};
use gazelab::linalg::inv_logit;
use gazelab::sim::{simulate, summarize_runs, Mechanism, SimConfig, SwitchRate};

fn base(mechanism: Mechanism, n_subjects: usize, n_items: usize, len: usize, seed: u64) -> SimConfig {
    SimConfig {
        n_subjects,
        n_items,
        series_length: len,
        bin_seconds: 0.01,
        mechanism,
        true_beta: Default::default(),
        enter: Default::default(),
        leave: Default::default(),
        initial_on_target: 0.5,
        latent_phi: 0.0,
        sigma_u2: 0.0,
        sigma_v2: 0.0,
        seed,
    }
}

#[test]
fn symmetric_markov_chain_is_balanced() {
    let p = 0.05;
    let len = 1000;
    let mut cfg = base(Mechanism::TwoStateMarkov, 100, 10, len, 7);
    cfg.enter = SwitchRate {
        probability: p,
        ..Default::default()
    };
    cfg.leave = cfg.enter;
    let sim = simulate(&cfg).unwrap();
    let n: usize = sim.series.iter().map(|s| s.len()).sum();
    assert_eq!(n, 1_000_000);
    let ones: usize = sim
        .series
        .iter()
        .flat_map(|s| &s.samples)
        .map(|&y| usize::from(y))
        .sum();
    let mean = ones as f64 / n as f64;
    // Stationary chain with lag-k correlation (1 − 2p)^k.
    let rho = 1.0 - 2.0 * p;
    let mut pair_sum = len as f64;
    for k in 1..len {
        pair_sum += 2.0 * (len - k) as f64 * rho.powi(k as i32);
    }
    let series_var = 0.25 * pair_sum / (len * len) as f64;
    let se = (series_var / sim.series.len() as f64).sqrt();
    assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn latent_white_noise_has_no_lag_one_correlation() {
    let sim = simulate(&base(Mechanism::LatentAr1, 100, 10, 1000, 9)).unwrap();
    let all: Vec<f64> = sim
        .series
        .iter()
        .flat_map(|s| &s.samples)
        .map(|&y| f64::from(y))
        .collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let mut num = 0.0;
    for s in &sim.series {
        for w in s.samples.windows(2) {
            num += (f64::from(w[0]) - mean) * (f64::from(w[1]) - mean);
        }
    }
    let den: f64 = all.iter().map(|y| (y - mean).powi(2)).sum();
    let rho = num / den;
    assert!(rho.abs() < 0.01, "{rho}");
}

#[test]
fn latent_marginal_mean_follows_the_logistic_curve() {
    let len = 112;
    let mut cfg = base(Mechanism::LatentAr1, 2500, 4, len, 13);
    cfg.latent_phi = 0.8;
    cfg.true_beta = [
        ("Intercept", -0.4),
        ("Contrast", 0.5),
        ("Privileged", 0.8),
        ("Time", 0.6),
        ("Contrast*Time", -0.5),
        ("Priv*Time", 0.3),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let sim = simulate(&cfg).unwrap();
    let b = &sim.truth.coefficients;
    for item in 0..4 {
        let group: Vec<_> = sim
            .series
            .iter()
            .filter(|s| s.key.item == format!("I{item:03}"))
            .collect();
        let c = group[0].conditions;
        let (ct, pv) = (f64::from(c.contrast), f64::from(c.privileged));
        for t in [0, len / 2, len - 1] {
            let tt = t as f64 / (len - 1) as f64;
            let p = inv_logit(b[0] + b[1] * ct + b[2] * pv + b[3] * tt + b[4] * ct * tt + b[5] * pv * tt);
            let n = group.len() as f64;
            let observed = group.iter().map(|s| f64::from(s.samples[t])).sum::<f64>() / n;
            let se = (p * (1.0 - p) / n).sqrt();
            assert!(
                (observed - p).abs() < 3.0 * se,
                "item {item} bin {t}: {observed} vs {p}"
            );
        }
    }
}

#[test]
fn paper_like_preset_is_calibrated_to_median_run_35() {
    let sim = simulate(&SimConfig::preset("paper-like").unwrap()).unwrap();
    let (kept, _) = exclude_series(sim.series);
    let runs = summarize_runs(&kept).unwrap();
    assert!((30.0..=40.0).contains(&runs.median), "{runs:?}");
}

#[test]
fn same_seed_writes_identical_bytes() {
    let cfg = SimConfig::preset("paper-like").unwrap();
    let write = || {
        let mut buf = Vec::new();
        write_long_format(&mut buf, &simulate(&cfg).unwrap().series).unwrap();
        buf
    };
    assert_eq!(write(), write());
}
