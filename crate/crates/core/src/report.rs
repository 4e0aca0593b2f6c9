//! Result tables in the fixed-effect / standard-error / variance layout,
//! and the pipeline that fills all five method columns from one dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cox::{fit_cox_with, total_effect, CoxOptions, HazardFit, TotalEffect};
use crate::design::{
    build_frame, FrameOptions, TimeScale, CONTRAST, CONTRAST_TIME, INTERCEPT, LAG, PRIVILEGED, PRIVILEGED_TIME, TIME,
};
use crate::error::Result;
use crate::gee::{gee_fit, WorkingCorrelation, DEFAULT_BANDWIDTH};
use crate::glm::FitResult;
use crate::glmm::{fit_glmm_laplace, RandomEffectsSpec};
use crate::ingest::TrialSeries;
use crate::rle::{encode_all, episodes_to_survival};

/// Fixed-effect rows, in display order.
pub const TERM_ROWS: [&str; 7] = [
    INTERCEPT,
    LAG,
    PRIVILEGED,
    CONTRAST,
    TIME,
    PRIVILEGED_TIME,
    CONTRAST_TIME,
];
pub const METHOD_COLUMNS: [&str; 5] = ["GLM", "AR1", "MA25", "LAG", "COX"];
pub const VARIANCE_ROWS: [&str; 4] = ["GLM", "LAG", "AR1", "MA25"];
pub const VARIANCE_COLUMNS: [&str; 4] = ["Subject variance", "Item variance", "phi", "alpha"];

/// Survival covariates reported as total effects on 0→1 transitions.
pub const COX_TOTALS: [(&str, &str); 2] = [(PRIVILEGED, "Privileged:to_target"), (CONTRAST, "Contrast:to_target")];

/// Rounds to six significant digits.
pub fn round6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

/// Six significant digits, plain notation unless the magnitude is extreme.
pub fn format6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&exp) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cell {
    Missing,
    Value {
        value: f64,
    },
    /// A value used by the fit alongside a separately estimated one, shown
    /// as `value (estimate)`.
    WithEstimate {
        value: f64,
        estimate: Option<f64>,
    },
}

impl Cell {
    fn value(v: f64) -> Self {
        Self::Value { value: round6(v) }
    }

    fn render(&self) -> String {
        match self {
            Self::Missing => "--".into(),
            Self::Value { value } => format6(*value),
            Self::WithEstimate { value, estimate } => format!(
                "{} ({})",
                format6(*value),
                estimate.map_or_else(|| "--".to_string(), format6)
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    /// Drops rows whose cells are all missing.
    pub fn without_empty_rows(mut self) -> Self {
        self.rows.retain(|r| r.cells.iter().any(|c| *c != Cell::Missing));
        self
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<&Cell> {
        let j = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().find(|r| r.label == row).map(|r| &r.cells[j])
    }

    pub fn render(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![std::iter::once(self.row_header.clone())
            .chain(self.columns.iter().cloned())
            .collect()];
        for r in &self.rows {
            grid.push(
                std::iter::once(r.label.clone())
                    .chain(r.cells.iter().map(Cell::render))
                    .collect(),
            );
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|j| grid.iter().map(|row| row[j].chars().count()).max().unwrap_or(0))
            .collect();
        let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
        let mut out = format!("{}\n{rule}\n", self.title);
        for (i, row) in grid.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (s, w))| if j == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{rule}");
            }
        }
        out.push_str(&rule);
        out.push('\n');
        out
    }
}

/// Estimates and standard errors of one method, keyed by row label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodColumn {
    pub estimates: BTreeMap<String, (f64, f64)>,
}

impl MethodColumn {
    pub fn from_fit(fit: &FitResult) -> Self {
        let estimates = fit
            .names
            .iter()
            .zip(&fit.coefficients)
            .map(|(n, &b)| (n.clone(), (b, fit.se(n).unwrap_or(f64::NAN))))
            .collect();
        Self { estimates }
    }

    /// Total effects of Privileged and Contrast on 0→1 transitions.
    pub fn from_cox(fit: &HazardFit) -> Result<(Self, BTreeMap<String, TotalEffect>)> {
        let mut estimates = BTreeMap::new();
        let mut totals = BTreeMap::new();
        for (main, interaction) in COX_TOTALS {
            let te = total_effect(fit, main, interaction)?;
            estimates.insert(main.to_string(), (te.estimate, te.robust_se));
            totals.insert(main.to_string(), te);
        }
        Ok((Self { estimates }, totals))
    }
}

fn term_table(title: &str, columns: &[(&str, &MethodColumn)], pick: impl Fn((f64, f64)) -> f64) -> Table {
    Table {
        title: title.into(),
        row_header: "Term".into(),
        columns: columns.iter().map(|(n, _)| n.to_string()).collect(),
        rows: TERM_ROWS
            .iter()
            .map(|&term| Row {
                label: term.into(),
                cells: columns
                    .iter()
                    .map(|(_, c)| c.estimates.get(term).map_or(Cell::Missing, |&e| Cell::value(pick(e))))
                    .collect(),
            })
            .collect(),
    }
}

pub fn coefficient_table(columns: &[(&str, &MethodColumn)]) -> Table {
    term_table("Fixed-effect estimates", columns, |e| e.0)
}

pub fn standard_error_table(columns: &[(&str, &MethodColumn)]) -> Table {
    term_table("Standard errors of fixed-effect estimates", columns, |e| e.1)
}

/// Variance-component cells for one model.
pub fn variance_row(label: &str, fit: &FitResult, free_phi: Option<f64>) -> Row {
    let (subject, item) = match &fit.variance_components {
        Some(vc) => (Cell::value(vc.subject), Cell::value(vc.item)),
        None => (Cell::Missing, Cell::Missing),
    };
    let phi = match &fit.correlation {
        Some(c) if c.estimated => Cell::value(c.value),
        Some(c) => Cell::WithEstimate {
            value: round6(c.value),
            estimate: free_phi.map(round6),
        },
        None => Cell::Missing,
    };
    let alpha = fit.dispersion.map_or(Cell::Missing, Cell::value);
    Row {
        label: label.into(),
        cells: vec![subject, item, phi, alpha],
    }
}

pub fn variance_table(rows: Vec<Row>) -> Table {
    Table {
        title: "Random-effect variances and correlation parameters".into(),
        row_header: "Model".into(),
        columns: VARIANCE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    }
}

/// Settings of the five-method comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub time_scale: TimeScale,
    /// Working-correlation parameter held fixed in the AR1 and MA25 fits.
    pub phi: f64,
    pub ar1_ridge: f64,
    pub band: usize,
    pub band_ridge: f64,
    pub cox: CoxSettings,
    pub variance_seed: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoxSettings {
    pub ties: crate::cox::Ties,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            time_scale: TimeScale::UnitInterval,
            phi: 0.95,
            ar1_ridge: 1e-5,
            band: DEFAULT_BANDWIDTH,
            band_ridge: 1e-2,
            cox: CoxSettings::default(),
            variance_seed: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub coefficients: Table,
    pub standard_errors: Table,
    pub variances: Table,
    pub glm: FitResult,
    pub lag: FitResult,
    pub ar1: FitResult,
    pub ar1_free: FitResult,
    pub ma25: FitResult,
    pub cox: HazardFit,
    pub cox_totals: BTreeMap<String, TotalEffect>,
}

/// Fits all five methods to `series` (already cleaned) and assembles the
/// three tables.
pub fn run_compare(series: &[TrialSeries], opts: &CompareOptions) -> Result<Comparison> {
    let standard = build_frame(
        series,
        FrameOptions {
            lag: false,
            time_scale: opts.time_scale,
        },
    )?;
    let lagged = build_frame(
        series,
        FrameOptions {
            lag: true,
            time_scale: opts.time_scale,
        },
    )?;
    let seed = opts.variance_seed;
    log::info!("fitting GLM with crossed random intercepts");
    let glm = fit_glmm_laplace(&standard, &RandomEffectsSpec::for_frame(&standard, seed, seed))?;
    log::info!("fitting LAG with crossed random intercepts");
    let lag = fit_glmm_laplace(&lagged, &RandomEffectsSpec::for_frame(&lagged, seed, seed))?;
    log::info!("fitting AR1 GEE");
    let ar1 = gee_fit(&standard, &WorkingCorrelation::ar1_fixed(opts.phi, opts.ar1_ridge))?;
    let ar1_free = gee_fit(&standard, &WorkingCorrelation::ar1_estimated(opts.ar1_ridge))?;
    log::info!("fitting MA{} GEE", opts.band);
    let ma25 = gee_fit(
        &standard,
        &WorkingCorrelation::toeplitz_band(opts.phi, opts.band, opts.band_ridge),
    )?;
    log::info!("fitting stratified Cox model");
    let survival = episodes_to_survival(&encode_all(series)?);
    let cox = fit_cox_with(
        &survival.data,
        CoxOptions {
            ties: opts.cox.ties,
            ..Default::default()
        },
    )?;
    let (cox_column, cox_totals) = MethodColumn::from_cox(&cox)?;

    let columns = [
        MethodColumn::from_fit(&glm),
        MethodColumn::from_fit(&ar1),
        MethodColumn::from_fit(&ma25),
        MethodColumn::from_fit(&lag),
        cox_column,
    ];
    let named: Vec<(&str, &MethodColumn)> = METHOD_COLUMNS.iter().copied().zip(columns.iter()).collect();
    let free_phi = ar1_free.correlation.as_ref().map(|c| c.value);
    let variances = variance_table(vec![
        variance_row("GLM", &glm, None),
        variance_row("LAG", &lag, None),
        variance_row("AR1", &ar1, free_phi),
        variance_row("MA25", &ma25, None),
    ]);
    Ok(Comparison {
        coefficients: coefficient_table(&named),
        standard_errors: standard_error_table(&named),
        variances,
        glm,
        lag,
        ar1,
        ar1_free,
        ma25,
        cox,
        cox_totals,
    })
}
