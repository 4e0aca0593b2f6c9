use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gazelab::cox::{fit_cox_with, CoxOptions, Ties};
use gazelab::design::{build_frame, FrameOptions, TimeScale};
use gazelab::gee::{gee_fit, WorkingCorrelation, DEFAULT_BANDWIDTH};
use gazelab::glm::{fit_irls, fit_lag, FitResult};
use gazelab::glmm::{fit_glmm_laplace, RandomEffectsSpec};
use gazelab::ingest::{
    apply_exclusions, exclude_series, first_trials, group_trials, load_long_format, write_long_format, Schema,
    TrialSeries,
};
use gazelab::report::{
    self, coefficient_table, standard_error_table, variance_row, variance_table, CompareOptions, CoxSettings,
    MethodColumn,
};
use gazelab::rle::{
    encode_all, episodes_to_survival, group_episodes, read_episode_file, write_episode_file_with_notes,
};
use gazelab::sim::{simulate, summarize_runs, SimConfig};
use serde::Serialize;

mod output;

use output::{print_tables, OutputDir, RunManifest, MANIFEST};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Fit(gazelab::Error),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Fit(e) => write!(f, "{e}"),
            Self::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl From<gazelab::Error> for CliError {
    fn from(e: gazelab::Error) -> Self {
        match e {
            gazelab::Error::Io(io) => Self::Io(io.to_string()),
            other => Self::Fit(other),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "gazelab",
    version,
    about = "Run-length encoding and regression models for binary gaze time series"
)]
struct Cli {
    /// Worker threads for the fitters (default: all cores).
    #[arg(long, global = true, env = "GAZELAB_THREADS")]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run-length encode a long-format file into an episode file.
    Encode(EncodeArgs),
    /// Fit one model and write its tables.
    Fit(FitArgs),
    /// Simulate a dataset from a configuration file or preset.
    Simulate(SimulateArgs),
    /// Fit all five methods and merge them into one set of tables.
    Compare(CompareArgs),
}

#[derive(Args, Serialize)]
struct SourceArgs {
    /// Sample width in seconds for long-format input.
    #[arg(long, default_value_t = gazelab::ingest::DEFAULT_BIN_SECONDS)]
    bin_seconds: f64,
    /// Rename an input column, e.g. `--column y=onTarget`.
    #[arg(long = "column", value_name = "NAME=HEADER")]
    columns: Vec<String>,
}

#[derive(Args, Serialize)]
struct EncodeArgs {
    input: PathBuf,
    /// Episode file to write.
    #[arg(short, long)]
    output: PathBuf,
    /// Also drop constant series instead of only warning about them.
    #[arg(long)]
    apply_exclusions: bool,
    #[command(flatten)]
    source: SourceArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    Glm,
    Lag,
    Glmm,
    Gee,
    Cox,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "snake_case")]
enum CorrKind {
    Ind,
    Ar1,
    Ma,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum TiesArg {
    #[default]
    Efron,
    Breslow,
}

impl From<TiesArg> for Ties {
    fn from(t: TiesArg) -> Self {
        match t {
            TiesArg::Efron => Ties::Efron,
            TiesArg::Breslow => Ties::Breslow,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum TimeScaleArg {
    #[default]
    Unit,
    Seconds,
}

impl From<TimeScaleArg> for TimeScale {
    fn from(t: TimeScaleArg) -> Self {
        match t {
            TimeScaleArg::Unit => TimeScale::UnitInterval,
            TimeScaleArg::Seconds => TimeScale::Seconds,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Format {
    #[default]
    Table,
    Structured,
}

#[derive(Args, Serialize)]
struct FitArgs {
    /// Long-format file, or an episode file for `--model cox`.
    input: PathBuf,
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Add the lag-1 response to a `glmm` fit.
    #[arg(long)]
    lag: bool,
    /// Working correlation for `gee`.
    #[arg(long, value_enum)]
    corr: Option<CorrKind>,
    /// Fixed working-correlation parameter.
    #[arg(long, allow_hyphen_values = true)]
    phi: Option<f64>,
    /// Estimate the AR1 parameter from the residuals.
    #[arg(long)]
    estimate_phi: bool,
    /// Ridge added to the working correlation diagonal
    /// (default 0, or 1e-2 for `ma`).
    #[arg(long)]
    ridge: Option<f64>,
    /// Bandwidth of the `ma` working correlation.
    #[arg(long, default_value_t = DEFAULT_BANDWIDTH)]
    band: usize,
    #[arg(long, value_enum, default_value_t)]
    ties: TiesArg,
    #[arg(long, value_enum, default_value_t)]
    time_scale: TimeScaleArg,
    #[arg(long, default_value = "gazelab-out")]
    output_dir: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
    #[command(flatten)]
    source: SourceArgs,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration (`paper-like` or `paper-scale`).
    #[arg(long)]
    preset: Option<String>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "gazelab-sim")]
    output_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct CompareArgs {
    /// Long-format file.
    #[arg(conflicts_with = "preset", required_unless_present = "preset")]
    input: Option<PathBuf>,
    /// Simulate the data from a built-in configuration instead.
    #[arg(long)]
    preset: Option<String>,
    /// Override the preset's seed.
    #[arg(long, requires = "preset")]
    seed: Option<u64>,
    /// Working-correlation parameter of the AR1 and MA fits.
    #[arg(long, default_value_t = 0.95)]
    phi: f64,
    #[arg(long, default_value_t = 1e-5)]
    ridge: f64,
    #[arg(long, default_value_t = DEFAULT_BANDWIDTH)]
    band: usize,
    #[arg(long, default_value_t = 1e-2)]
    band_ridge: f64,
    #[arg(long, value_enum, default_value_t)]
    ties: TiesArg,
    #[arg(long, value_enum, default_value_t)]
    time_scale: TimeScaleArg,
    #[arg(long, default_value = "gazelab-out")]
    output_dir: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
    #[command(flatten)]
    source: SourceArgs,
}

fn schema_from(columns: &[String]) -> Result<Schema, CliError> {
    let mut schema = Schema::default();
    for spec in columns {
        let (name, header) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--column expects NAME=HEADER, got `{spec}`")))?;
        let slot = match name {
            "subject" => &mut schema.subject,
            "item" => &mut schema.item,
            "trial" => &mut schema.trial,
            "time" => &mut schema.time,
            "y" => &mut schema.y,
            "contrast" => &mut schema.contrast,
            "privileged" => &mut schema.privileged,
            other => return Err(CliError::Usage(format!("unknown column name `{other}`"))),
        };
        *slot = header.to_string();
    }
    Ok(schema)
}

fn is_episode_file(path: &Path) -> Result<bool, CliError> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(first.trim_start().starts_with("# bin_seconds"))
}

fn load_series(
    path: &Path,
    source: &SourceArgs,
) -> Result<(Vec<TrialSeries>, gazelab::ingest::ExclusionSummary), CliError> {
    if is_episode_file(path)? {
        return Err(CliError::Usage(format!(
            "{} is an episode file; this command needs long-format input",
            path.display()
        )));
    }
    let records = load_long_format(path, &schema_from(&source.columns)?)?;
    Ok(apply_exclusions(&records, source.bin_seconds)?)
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

#[derive(Serialize)]
struct EncodeSummary {
    records_in: usize,
    records_out: usize,
    ratio: f64,
    series: usize,
    constant_series: usize,
    repeated_trials_dropped: usize,
    exclusions_applied: bool,
}

fn cmd_encode(args: &EncodeArgs) -> Result<bool, CliError> {
    if is_episode_file(&args.input)? {
        return Err(CliError::Usage(format!(
            "{} is already an episode file",
            args.input.display()
        )));
    }
    let manifest = RunManifest::new("encode", vec![args.input.display().to_string()], to_json(args));
    let records = load_long_format(&args.input, &schema_from(&args.source.columns)?)?;
    let trials = group_trials(&records, args.source.bin_seconds)?;
    let (firsts, repeated, _) = first_trials(trials);
    let constant: Vec<String> = firsts
        .iter()
        .filter(|s| s.is_constant())
        .map(|s| s.key.to_string())
        .collect();
    let series = if args.apply_exclusions {
        exclude_series(firsts).0
    } else {
        for key in &constant {
            log::warn!("series {key} is constant and would be excluded from model fits");
        }
        firsts
    };
    if series.is_empty() {
        return Err(CliError::Fit(gazelab::Error::EmptyInput(
            "no series left to encode".into(),
        )));
    }
    let episodes: Vec<_> = encode_all(&series)?.into_iter().flatten().collect();
    let samples: usize = series.iter().map(TrialSeries::len).sum();
    let summary = EncodeSummary {
        records_in: samples,
        records_out: episodes.len(),
        ratio: episodes.len() as f64 / samples as f64,
        series: series.len(),
        constant_series: constant.len(),
        repeated_trials_dropped: repeated,
        exclusions_applied: args.apply_exclusions,
    };

    let dir = args
        .output
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = args
        .output
        .file_name()
        .ok_or_else(|| CliError::Usage("--output must name a file".into()))?
        .to_string_lossy()
        .to_string();
    let mut out = OutputDir::create(dir)?;
    let file = File::create(&args.output).map_err(|e| CliError::Io(format!("{}: {e}", args.output.display())))?;
    write_episode_file_with_notes(
        BufWriter::new(file),
        args.source.bin_seconds,
        &episodes,
        &[("manifest", MANIFEST)],
    )?;
    out.record(&name);
    out.write_json(&format!("{name}.summary.json"), "summary", &summary)?;
    println!(
        "{} samples -> {} runs (ratio {}) from {} series",
        summary.records_in,
        summary.records_out,
        report::format6(summary.ratio),
        summary.series
    );
    out.finish(manifest, true)?;
    Ok(true)
}

fn working_correlation(args: &FitArgs) -> Result<WorkingCorrelation, CliError> {
    let corr = args.corr.unwrap_or(CorrKind::Ind);
    if args.estimate_phi && args.phi.is_some() {
        return Err(CliError::Usage(
            "--phi and --estimate-phi are mutually exclusive".into(),
        ));
    }
    let spec = match corr {
        CorrKind::Ind => {
            if args.phi.is_some() || args.estimate_phi {
                return Err(CliError::Usage("--corr ind takes no correlation parameter".into()));
            }
            WorkingCorrelation {
                ridge: args.ridge.unwrap_or(0.0),
                ..WorkingCorrelation::independence()
            }
        }
        CorrKind::Ar1 => match args.phi {
            Some(phi) => WorkingCorrelation::ar1_fixed(phi, args.ridge.unwrap_or(0.0)),
            None => WorkingCorrelation::ar1_estimated(args.ridge.unwrap_or(0.0)),
        },
        CorrKind::Ma => {
            if args.estimate_phi {
                return Err(CliError::Usage("--corr ma supports a fixed --phi only".into()));
            }
            let phi = args
                .phi
                .ok_or_else(|| CliError::Usage("--corr ma needs --phi".into()))?;
            WorkingCorrelation::toeplitz_band(phi, args.band, args.ridge.unwrap_or(1e-2))
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn column_label(args: &FitArgs, spec: Option<&WorkingCorrelation>) -> String {
    match (args.model, spec) {
        (ModelKind::Glm, _) => "GLM".into(),
        (ModelKind::Lag, _) => "LAG".into(),
        (ModelKind::Glmm, _) if args.lag => "GLMM-LAG".into(),
        (ModelKind::Glmm, _) => "GLMM".into(),
        (ModelKind::Gee, Some(s)) => match s.kind {
            gazelab::gee::CorrelationKind::Independence => "IND".into(),
            gazelab::gee::CorrelationKind::Ar1 => "AR1".into(),
            gazelab::gee::CorrelationKind::ToeplitzBand => format!("MA{}", s.bandwidth),
        },
        _ => "COX".into(),
    }
}

fn cmd_fit(args: &FitArgs) -> Result<bool, CliError> {
    if args.corr.is_some() && !matches!(args.model, ModelKind::Gee) {
        return Err(CliError::Usage("--corr applies to --model gee only".into()));
    }
    if args.lag && !matches!(args.model, ModelKind::Glmm) {
        return Err(CliError::Usage(
            "--lag applies to --model glmm (use --model lag for the fixed-effects lag model)".into(),
        ));
    }
    let mut manifest = RunManifest::new("fit", vec![args.input.display().to_string()], to_json(args));
    manifest.model = Some(to_json(&args.model).as_str().unwrap_or_default().to_string());
    let structured = matches!(args.format, Format::Structured);

    if let ModelKind::Cox = args.model {
        if !is_episode_file(&args.input)? {
            return Err(CliError::Usage(format!(
                "--model cox needs an episode file (run `gazelab encode` on {} first)",
                args.input.display()
            )));
        }
        let file = File::open(&args.input).map_err(|e| CliError::Io(format!("{}: {e}", args.input.display())))?;
        let (_, episodes) = read_episode_file(BufReader::new(file))?;
        let survival = episodes_to_survival(&group_episodes(episodes));
        let fit = fit_cox_with(
            &survival.data,
            CoxOptions {
                ties: args.ties.into(),
                ..Default::default()
            },
        )?;
        let (column, totals) = MethodColumn::from_cox(&fit)?;
        let cols = [("COX", &column)];
        let coef = coefficient_table(&cols).without_empty_rows();
        let se = standard_error_table(&cols).without_empty_rows();
        let mut out = OutputDir::create(&args.output_dir)?;
        out.write_table("coefficients", &coef)?;
        out.write_table("standard_errors", &se)?;
        out.write_json(
            "hazard.json",
            "fit",
            &serde_json::json!({ "model": fit, "total_effects": totals, "dropped_final_runs": survival.dropped }),
        )?;
        print_tables(&[&coef, &se], structured);
        out.finish(manifest, fit.converged)?;
        return Ok(fit.converged);
    }

    if is_episode_file(&args.input)? {
        return Err(CliError::Usage(
            format!(
                "{} is an episode file; --model {:?} needs long-format input",
                args.input.display(),
                args.model
            )
            .to_lowercase(),
        ));
    }
    let (series, exclusions) = load_series(&args.input, &args.source)?;
    let lag = matches!(args.model, ModelKind::Lag) || args.lag;
    let frame = build_frame(
        &series,
        FrameOptions {
            lag,
            time_scale: args.time_scale.into(),
        },
    )?;
    let mut spec = None;
    let fit: FitResult = match args.model {
        ModelKind::Glm => fit_irls(&frame)?,
        ModelKind::Lag => fit_lag(&frame)?,
        ModelKind::Glmm => fit_glmm_laplace(&frame, &RandomEffectsSpec::for_frame(&frame, 0.1, 0.1))?,
        ModelKind::Gee => {
            let s = working_correlation(args)?;
            manifest.correlation = Some(to_json(&s));
            spec = Some(s);
            gee_fit(&frame, &s)?
        }
        ModelKind::Cox => unreachable!(),
    };
    let label = column_label(args, spec.as_ref());
    let column = MethodColumn::from_fit(&fit);
    let cols = [(label.as_str(), &column)];
    let coef = coefficient_table(&cols).without_empty_rows();
    let se = standard_error_table(&cols).without_empty_rows();
    let mut out = OutputDir::create(&args.output_dir)?;
    out.write_table("coefficients", &coef)?;
    out.write_table("standard_errors", &se)?;
    let mut tables = vec![coef, se];
    if fit.variance_components.is_some() || fit.correlation.is_some() || fit.dispersion.is_some() {
        let moment = fit.correlation.as_ref().and_then(|c| c.moment_estimate);
        let var = variance_table(vec![variance_row(&label, &fit, moment)]);
        out.write_table("variance", &var)?;
        tables.push(var);
    }
    out.write_json(
        "fit.json",
        "fit",
        &serde_json::json!({ "model": fit, "exclusions": exclusions }),
    )?;
    print_tables(&tables.iter().collect::<Vec<_>>(), structured);
    out.finish(manifest, fit.converged)?;
    Ok(fit.converged)
}

fn load_config(args: &SimulateArgs) -> Result<SimConfig, CliError> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            SimConfig::from_toml(&text)?
        }
        (None, Some(name)) => SimConfig::preset(name)?,
        (None, None) => return Err(CliError::Usage("give --config or --preset".into())),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<bool, CliError> {
    let cfg = load_config(args)?;
    let inputs = args.config.iter().map(|p| p.display().to_string()).collect();
    let mut manifest = RunManifest::new("simulate", inputs, to_json(args));
    manifest.seed = Some(cfg.seed);
    let sim = simulate(&cfg)?;
    let runs = summarize_runs(&sim.series)?;
    let (kept, _) = exclude_series(sim.series.clone());
    let kept_runs = if kept.is_empty() {
        None
    } else {
        Some(summarize_runs(&kept)?)
    };

    let mut out = OutputDir::create(&args.output_dir)?;
    let mut data = format!("# manifest={MANIFEST}\n").into_bytes();
    write_long_format(&mut data, &sim.series)?;
    out.write_text("data.csv", &String::from_utf8_lossy(&data))?;
    out.write_text("config.toml", &format!("# manifest: {MANIFEST}\n{}", cfg.to_toml()))?;
    out.write_json(
        "truth.json",
        "truth",
        &serde_json::json!({ "ground_truth": sim.truth, "runs": runs, "runs_non_constant": kept_runs }),
    )?;
    println!(
        "{} series, {} samples; run length median {} mean {} over {} runs",
        sim.truth.n_series,
        sim.truth.n_samples,
        report::format6(runs.median),
        report::format6(runs.mean),
        runs.count
    );
    if let Some(k) = kept_runs {
        println!(
            "non-constant series only: median {} mean {} over {} runs",
            report::format6(k.median),
            report::format6(k.mean),
            k.count
        );
    }
    out.finish(manifest, true)?;
    Ok(true)
}

fn cmd_compare(args: &CompareArgs) -> Result<bool, CliError> {
    let inputs = args.input.iter().map(|p| p.display().to_string()).collect();
    let mut manifest = RunManifest::new("compare", inputs, to_json(args));
    manifest.model = Some("compare".into());
    let series = match (&args.input, &args.preset) {
        (Some(path), _) => load_series(path, &args.source)?.0,
        (None, Some(name)) => {
            let mut cfg = SimConfig::preset(name)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            manifest.seed = Some(cfg.seed);
            exclude_series(simulate(&cfg)?.series).0
        }
        (None, None) => return Err(CliError::Usage("give an input file or --preset".into())),
    };
    let opts = CompareOptions {
        time_scale: args.time_scale.into(),
        phi: args.phi,
        ar1_ridge: args.ridge,
        band: args.band,
        band_ridge: args.band_ridge,
        cox: CoxSettings { ties: args.ties.into() },
        ..Default::default()
    };
    manifest.correlation = Some(serde_json::json!({
        "ar1": WorkingCorrelation::ar1_fixed(opts.phi, opts.ar1_ridge),
        "ar1_estimated": WorkingCorrelation::ar1_estimated(opts.ar1_ridge),
        "ma": WorkingCorrelation::toeplitz_band(opts.phi, opts.band, opts.band_ridge),
    }));
    let cmp = report::run_compare(&series, &opts)?;
    let mut out = OutputDir::create(&args.output_dir)?;
    out.write_table("coefficients", &cmp.coefficients)?;
    out.write_table("standard_errors", &cmp.standard_errors)?;
    out.write_table("variance", &cmp.variances)?;
    let fits: BTreeMap<&str, &FitResult> = [
        ("glm", &cmp.glm),
        ("lag", &cmp.lag),
        ("ar1", &cmp.ar1),
        ("ar1_estimated", &cmp.ar1_free),
        ("ma", &cmp.ma25),
    ]
    .into_iter()
    .collect();
    out.write_json(
        "comparison.json",
        "fits",
        &serde_json::json!({ "models": fits, "cox": cmp.cox, "cox_total_effects": cmp.cox_totals }),
    )?;
    print_tables(
        &[&cmp.coefficients, &cmp.standard_errors, &cmp.variances],
        matches!(args.format, Format::Structured),
    );
    let converged = [&cmp.glm, &cmp.lag, &cmp.ar1, &cmp.ar1_free, &cmp.ma25]
        .iter()
        .all(|f| f.converged)
        && cmp.cox.converged;
    out.finish(manifest, converged)?;
    Ok(converged)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("usage error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not configure {n} threads: {e}");
        }
    }
    let result = match &cli.command {
        Command::Encode(a) => cmd_encode(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Compare(a) => cmd_compare(a),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("fit did not converge");
            ExitCode::from(1)
        }
        Err(e @ CliError::Usage(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
