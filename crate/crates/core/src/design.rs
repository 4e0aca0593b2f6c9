//! Model frames: response, design matrix and cluster bookkeeping.
//!
//! The standard design has six columns: intercept, Contrast, Privileged,
//! Time and the two Time interactions. The lag design appends the previous
//! sample and drops the first row of every series.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ClusterKey, TrialSeries};

pub const INTERCEPT: &str = "Intercept";
pub const CONTRAST: &str = "Contrast";
pub const PRIVILEGED: &str = "Privileged";
pub const TIME: &str = "Time";
pub const CONTRAST_TIME: &str = "Contrast*Time";
pub const PRIVILEGED_TIME: &str = "Priv*Time";
pub const LAG: &str = "Ylag-1";

/// How the within-trial time covariate is coded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScale {
    /// Sample `t` of a length-`T` series maps to `t / (T - 1)`.
    #[default]
    UnitInterval,
    /// Elapsed seconds, `t * bin_seconds`.
    Seconds,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameOptions {
    pub lag: bool,
    pub time_scale: TimeScale,
}

/// Contiguous rows belonging to one subject-item trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub key: ClusterKey,
    pub rows: Range<usize>,
    pub subject: usize,
    pub item: usize,
}

#[derive(Clone, Debug)]
pub struct ModelFrame {
    pub response: Vec<f64>,
    pub design: DMatrix<f64>,
    pub column_names: Vec<String>,
    pub time: Vec<f64>,
    pub clusters: Vec<Cluster>,
    pub subjects: Vec<String>,
    pub items: Vec<String>,
}

impl ModelFrame {
    pub fn n_rows(&self) -> usize {
        self.response.len()
    }

    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    /// Per-row cluster key, aligned with the response.
    pub fn cluster_keys(&self) -> Vec<ClusterKey> {
        self.clusters
            .iter()
            .flat_map(|c| std::iter::repeat_n(c.key.clone(), c.rows.len()))
            .collect()
    }

    /// Builds a frame from raw parts with one cluster per distinct key; rows
    /// of a cluster must be contiguous.
    pub fn from_parts(
        response: Vec<f64>,
        design: DMatrix<f64>,
        column_names: Vec<String>,
        keys: &[ClusterKey],
    ) -> Result<Self> {
        let n = response.len();
        if design.nrows() != n || keys.len() != n || design.ncols() != column_names.len() {
            return Err(Error::Structure("frame parts have mismatched dimensions".into()));
        }
        if n == 0 {
            return Err(Error::EmptyInput("frame has no rows".into()));
        }
        if response.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Domain("response must be 0/1".into()));
        }
        let subjects = levels(keys.iter().map(|k| k.subject.as_str()));
        let items = levels(keys.iter().map(|k| k.item.as_str()));
        let mut clusters: Vec<Cluster> = Vec::new();
        let mut start = 0;
        for r in 1..=n {
            if r == n || keys[r] != keys[start] {
                let key = keys[start].clone();
                if clusters.iter().any(|c| c.key == key) {
                    return Err(Error::Structure(format!("rows of cluster {key} are not contiguous")));
                }
                clusters.push(Cluster {
                    subject: subjects.binary_search(&key.subject).unwrap(),
                    item: items.binary_search(&key.item).unwrap(),
                    key,
                    rows: start..r,
                });
                start = r;
            }
        }
        Ok(Self {
            response,
            design,
            column_names,
            time: vec![0.0; n],
            clusters,
            subjects,
            items,
        })
    }

    /// Writes the frame as comma-separated text for inspection.
    pub fn dump<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["subject".to_string(), "item".to_string(), "y".to_string()];
        header.extend(self.column_names.iter().cloned());
        w.write_record(&header)?;
        for c in &self.clusters {
            for r in c.rows.clone() {
                let mut rec = vec![c.key.subject.clone(), c.key.item.clone(), self.response[r].to_string()];
                rec.extend((0..self.n_cols()).map(|j| self.design[(r, j)].to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn levels<'a>(it: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeMap<&str, ()> = it.map(|s| (s, ())).collect();
    set.into_keys().map(str::to_string).collect()
}

/// Standard column names, optionally with the lag column appended.
pub fn column_names(lag: bool) -> Vec<String> {
    let mut names: Vec<String> = [INTERCEPT, CONTRAST, PRIVILEGED, TIME, CONTRAST_TIME, PRIVILEGED_TIME]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if lag {
        names.push(LAG.to_string());
    }
    names
}

pub fn build_frame(series: &[TrialSeries], options: FrameOptions) -> Result<ModelFrame> {
    let mut ordered: Vec<&TrialSeries> = series.iter().collect();
    ordered.sort_by(|a, b| a.key.cmp(&b.key));
    for w in ordered.windows(2) {
        if w[0].key == w[1].key {
            return Err(Error::Structure(format!("duplicate series for {}", w[0].key)));
        }
    }
    let skip = usize::from(options.lag);
    let usable: Vec<&TrialSeries> = ordered
        .into_iter()
        .filter(|s| {
            let ok = s.len() > skip;
            if !ok {
                log::warn!("series {} has no lagged row and is left out of the frame", s.key);
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyInput("no series available for the model frame".into()));
    }
    if let Some(s) = usable.iter().find(|s| s.samples.iter().any(|&y| y > 1)) {
        return Err(Error::Domain(format!("series {} is not binary", s.key)));
    }

    let names = column_names(options.lag);
    let q = names.len();
    let n: usize = usable.iter().map(|s| s.len() - skip).sum();
    let subjects = levels(usable.iter().map(|s| s.key.subject.as_str()));
    let items = levels(usable.iter().map(|s| s.key.item.as_str()));

    let mut design = DMatrix::<f64>::zeros(n, q);
    let mut response = Vec::with_capacity(n);
    let mut time = Vec::with_capacity(n);
    let mut clusters = Vec::with_capacity(usable.len());
    let mut row = 0;
    for s in usable {
        let len = s.len();
        let contrast = f64::from(s.conditions.contrast);
        let privileged = f64::from(s.conditions.privileged);
        let start = row;
        for t in skip..len {
            let tt = match options.time_scale {
                TimeScale::UnitInterval if len > 1 => t as f64 / (len - 1) as f64,
                TimeScale::UnitInterval => 0.0,
                TimeScale::Seconds => t as f64 * s.bin_seconds,
            };
            design[(row, 0)] = 1.0;
            design[(row, 1)] = contrast;
            design[(row, 2)] = privileged;
            design[(row, 3)] = tt;
            design[(row, 4)] = tt * contrast;
            design[(row, 5)] = tt * privileged;
            if options.lag {
                design[(row, 6)] = f64::from(s.samples[t - 1]);
            }
            response.push(f64::from(s.samples[t]));
            time.push(tt);
            row += 1;
        }
        clusters.push(Cluster {
            subject: subjects.binary_search(&s.key.subject).unwrap(),
            item: items.binary_search(&s.key.item).unwrap(),
            key: s.key.clone(),
            rows: start..row,
        });
    }
    Ok(ModelFrame {
        response,
        design,
        column_names: names,
        time,
        clusters,
        subjects,
        items,
    })
}
