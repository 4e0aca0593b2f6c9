//! Loading long-format trial data and applying the trial selection rules.
//!
//! Input rows carry one sample each: subject, item, trial, sample index, the
//! binary on-target indicator and the two item-level conditions. Rows are
//! grouped into per-trial series; only the first trial of each
//! subject-item pair is kept, and series without a single gaze transition
//! are dropped.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sample duration in seconds.
pub const DEFAULT_BIN_SECONDS: f64 = 0.01;

/// Subject-by-item pair; the clustering unit for every model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterKey {
    pub subject: String,
    pub item: String,
}

impl ClusterKey {
    pub fn new(subject: impl Into<String>, item: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            item: item.into(),
        }
    }
}

impl fmt::Display for ClusterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.subject, self.item)
    }
}

/// Item-level experimental conditions, coded 0/1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditions {
    pub contrast: u8,
    pub privileged: u8,
}

/// One row of the long-format input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObservationRecord {
    pub subject_id: String,
    pub item_id: String,
    pub trial_index: u32,
    pub time_index: u32,
    pub y: u8,
    pub contrast: u8,
    pub privileged: u8,
}

/// One subject-item trial: ordered 0/1 samples on a fixed time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSeries {
    pub key: ClusterKey,
    pub conditions: Conditions,
    pub bin_seconds: f64,
    pub samples: Vec<u8>,
}

impl TrialSeries {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.bin_seconds
    }

    /// True when the series never changes state (a single run).
    pub fn is_constant(&self) -> bool {
        self.samples.windows(2).all(|w| w[0] == w[1])
    }
}

/// Column names of the long-format file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub subject: String,
    pub item: String,
    pub trial: String,
    pub time: String,
    pub y: String,
    pub contrast: String,
    pub privileged: String,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            subject: "subject".into(),
            item: "item".into(),
            trial: "trial".into(),
            time: "time".into(),
            y: "y".into(),
            contrast: "contrast".into(),
            privileged: "privileged".into(),
        }
    }
}

impl Schema {
    fn columns(&self) -> [&str; 7] {
        [
            &self.subject,
            &self.item,
            &self.trial,
            &self.time,
            &self.y,
            &self.contrast,
            &self.privileged,
        ]
    }
}

pub fn load_long_format(path: impl AsRef<Path>, schema: &Schema) -> Result<Vec<ObservationRecord>> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.as_ref().display()),
        ))
    })?;
    read_long_format(file, schema)
}

/// Parses comma-separated long-format rows. Row numbers in errors count
/// data rows from 1, excluding the header.
pub fn read_long_format<R: Read>(reader: R, schema: &Schema) -> Result<Vec<ObservationRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut index = [0usize; 7];
    for (slot, name) in index.iter_mut().zip(schema.columns()) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }

    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let field = |k: usize| row.get(index[k]).unwrap_or("");
        let int = |k: usize| -> Result<u32> {
            field(k).parse::<u32>().map_err(|_| Error::Parse {
                row: row_no,
                message: format!(
                    "column `{}` expects a nonnegative integer, found `{}`",
                    schema.columns()[k],
                    field(k)
                ),
            })
        };
        let binary = |k: usize| -> Result<u8> {
            match field(k) {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::Parse {
                    row: row_no,
                    message: format!("column `{}` must be 0 or 1, found `{other}`", schema.columns()[k]),
                }),
            }
        };
        out.push(ObservationRecord {
            subject_id: field(0).to_string(),
            item_id: field(1).to_string(),
            trial_index: int(2)?,
            time_index: int(3)?,
            y: binary(4)?,
            contrast: binary(5)?,
            privileged: binary(6)?,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("long-format file has no data rows".into()));
    }
    Ok(out)
}

/// Writes records in the default long-format layout.
pub fn write_long_format<W: std::io::Write>(writer: W, series: &[TrialSeries]) -> Result<()> {
    let schema = Schema::default();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(schema.columns())?;
    for s in series {
        for (t, y) in s.samples.iter().enumerate() {
            w.write_record([
                s.key.subject.as_str(),
                s.key.item.as_str(),
                "1",
                &t.to_string(),
                &y.to_string(),
                &s.conditions.contrast.to_string(),
                &s.conditions.privileged.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A trial before selection, still carrying its presentation order.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedTrial {
    pub trial_index: u32,
    pub series: TrialSeries,
}

/// Groups records into per-trial series, validating time grids and the
/// item-level constancy of the conditions. Output is sorted by
/// (subject, item, trial).
pub fn group_trials(records: &[ObservationRecord], bin_seconds: f64) -> Result<Vec<IndexedTrial>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no observation records".into()));
    }
    if !(bin_seconds > 0.0) {
        return Err(Error::Domain(format!(
            "bin_seconds must be positive, got {bin_seconds}"
        )));
    }
    let mut conditions: BTreeMap<(&str, &str), Conditions> = BTreeMap::new();
    let mut groups: BTreeMap<(&str, &str, u32), Vec<(u32, u8)>> = BTreeMap::new();
    for r in records {
        let c = Conditions {
            contrast: r.contrast,
            privileged: r.privileged,
        };
        let seen = conditions
            .entry((r.subject_id.as_str(), r.item_id.as_str()))
            .or_insert(c);
        if *seen != c {
            return Err(Error::InconsistentDesign {
                subject: r.subject_id.clone(),
                item: r.item_id.clone(),
                message: "contrast/privileged vary within the subject-item pair".into(),
            });
        }
        groups
            .entry((r.subject_id.as_str(), r.item_id.as_str(), r.trial_index))
            .or_default()
            .push((r.time_index, r.y));
    }

    let mut out = Vec::with_capacity(groups.len());
    for ((subject, item, trial), mut samples) in groups {
        samples.sort_by_key(|&(t, _)| t);
        for (expected, &(t, _)) in samples.iter().enumerate() {
            if t as usize != expected {
                return Err(Error::Structure(format!(
                    "subject `{subject}`, item `{item}`, trial {trial}: time indices are not consecutive from 0 (expected {expected}, found {t})"
                )));
            }
        }
        out.push(IndexedTrial {
            trial_index: trial,
            series: TrialSeries {
                key: ClusterKey::new(subject, item),
                conditions: conditions[&(subject, item)],
                bin_seconds,
                samples: samples.into_iter().map(|(_, y)| y).collect(),
            },
        });
    }
    Ok(out)
}

/// Counts of series and samples removed by each selection rule.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionSummary {
    pub input_series: usize,
    pub input_samples: usize,
    pub repeated_trial_series: usize,
    pub repeated_trial_samples: usize,
    pub constant_series: usize,
    pub constant_samples: usize,
    pub retained_series: usize,
    pub retained_samples: usize,
}

/// Keeps the earliest trial of every subject-item pair.
pub fn first_trials(trials: Vec<IndexedTrial>) -> (Vec<TrialSeries>, usize, usize) {
    let mut best: BTreeMap<ClusterKey, IndexedTrial> = BTreeMap::new();
    let mut dropped = (0usize, 0usize);
    for trial in trials {
        match best.get_mut(&trial.series.key) {
            Some(kept) if kept.trial_index <= trial.trial_index => {
                dropped.0 += 1;
                dropped.1 += trial.series.len();
            }
            Some(kept) => {
                dropped.0 += 1;
                dropped.1 += kept.series.len();
                *kept = trial;
            }
            None => {
                best.insert(trial.series.key.clone(), trial);
            }
        }
    }
    (best.into_values().map(|t| t.series).collect(), dropped.0, dropped.1)
}

/// Drops constant series and deduplicates subject-item pairs. Idempotent.
pub fn exclude_series(series: Vec<TrialSeries>) -> (Vec<TrialSeries>, ExclusionSummary) {
    let indexed = series
        .into_iter()
        .map(|series| IndexedTrial { trial_index: 0, series })
        .collect();
    select(indexed)
}

fn select(trials: Vec<IndexedTrial>) -> (Vec<TrialSeries>, ExclusionSummary) {
    let mut summary = ExclusionSummary {
        input_series: trials.len(),
        input_samples: trials.iter().map(|t| t.series.len()).sum(),
        ..Default::default()
    };
    let (firsts, rep_series, rep_samples) = first_trials(trials);
    summary.repeated_trial_series = rep_series;
    summary.repeated_trial_samples = rep_samples;

    let mut kept = Vec::with_capacity(firsts.len());
    for s in firsts {
        if s.is_constant() {
            summary.constant_series += 1;
            summary.constant_samples += s.len();
        } else {
            kept.push(s);
        }
    }
    summary.retained_series = kept.len();
    summary.retained_samples = kept.iter().map(TrialSeries::len).sum();
    (kept, summary)
}

/// Groups records into trials, keeps the first trial per subject-item pair
/// and removes constant series.
pub fn apply_exclusions(
    records: &[ObservationRecord],
    bin_seconds: f64,
) -> Result<(Vec<TrialSeries>, ExclusionSummary)> {
    let trials = group_trials(records, bin_seconds)?;
    let (kept, summary) = select(trials);
    log::info!(
        "exclusions: {} series in, {} repeated trials dropped, {} constant series dropped, {} retained",
        summary.input_series,
        summary.repeated_trial_series,
        summary.constant_series,
        summary.retained_series
    );
    Ok((kept, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records_from(subject: &str, item: &str, trial: u32, bits: &str, c: u8, p: u8) -> Vec<ObservationRecord> {
        bits.bytes()
            .enumerate()
            .map(|(t, b)| ObservationRecord {
                subject_id: subject.into(),
                item_id: item.into(),
                trial_index: trial,
                time_index: t as u32,
                y: b - b'0',
                contrast: c,
                privileged: p,
            })
            .collect()
    }

    #[test]
    fn reads_ten_row_table_example() {
        let mut text = String::from("subject,item,trial,time,y,contrast,privileged\n");
        for (t, b) in "1110001111".chars().enumerate() {
            text.push_str(&format!("A,7,1,{t},{b},0,1\n"));
        }
        let recs = read_long_format(text.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(recs.len(), 10);
        assert!(recs.iter().enumerate().all(|(i, r)| r.time_index == i as u32));
    }

    #[test]
    fn header_only_is_empty_input() {
        let text = "subject,item,trial,time,y,contrast,privileged\n";
        let err = read_long_format(text.as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn non_binary_y_reports_row() {
        let mut text = String::from("subject,item,trial,time,y,contrast,privileged\n");
        for t in 0..6 {
            let y = if t == 4 { 2 } else { 1 };
            text.push_str(&format!("A,7,1,{t},{y},0,0\n"));
        }
        match read_long_format(text.as_bytes(), &Schema::default()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let text = "subject,item,trial,time,fix,contrast,privileged\nA,1,1,0,1,0,0\n";
        match read_long_format(text.as_bytes(), &Schema::default()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "y"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn custom_schema_names() {
        let schema = Schema {
            y: "gaze".into(),
            ..Schema::default()
        };
        let text = "subject,item,trial,time,gaze,contrast,privileged\nA,1,1,0,1,0,0\n";
        assert_eq!(read_long_format(text.as_bytes(), &schema).unwrap().len(), 1);
    }

    #[test]
    fn keeps_first_trial_only() {
        let mut recs = records_from("A", "7", 5, "0011", 0, 0);
        recs.extend(records_from("A", "7", 2, "0101", 0, 0));
        let (kept, summary) = apply_exclusions(&recs, 0.01).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].samples, vec![0, 1, 0, 1]);
        assert_eq!(summary.repeated_trial_series, 1);
    }

    #[test]
    fn drops_constant_and_keeps_minimal_series() {
        let mut recs = records_from("A", "1", 1, "0000000000", 0, 0);
        recs.extend(records_from("A", "2", 1, "01", 1, 0));
        let (kept, summary) = apply_exclusions(&recs, 0.01).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].key.item, "2");
        assert_eq!(summary.constant_series, 1);
        assert_eq!(summary.constant_samples, 10);
        assert_eq!(
            summary.retained_samples + summary.constant_samples + summary.repeated_trial_samples,
            summary.input_samples
        );
    }

    #[test]
    fn inconsistent_conditions_are_an_error() {
        let mut recs = records_from("A", "1", 1, "01", 0, 0);
        recs.extend(records_from("A", "1", 2, "01", 1, 0));
        assert!(matches!(
            apply_exclusions(&recs, 0.01),
            Err(Error::InconsistentDesign { .. })
        ));
    }

    #[test]
    fn gap_in_time_grid_is_an_error() {
        let mut recs = records_from("A", "1", 1, "0101", 0, 0);
        recs.remove(2);
        assert!(matches!(apply_exclusions(&recs, 0.01), Err(Error::Structure(_))));
    }

    #[test]
    fn output_sorted_and_idempotent() {
        let mut recs = records_from("B", "2", 1, "0110", 0, 0);
        recs.extend(records_from("A", "9", 3, "1100", 1, 1));
        recs.extend(records_from("A", "1", 1, "1111", 1, 0));
        let (kept, _) = apply_exclusions(&recs, 0.01).unwrap();
        let keys: Vec<_> = kept.iter().map(|s| s.key.to_string()).collect();
        assert_eq!(keys, vec!["A/9", "B/2"]);
        let (again, summary) = exclude_series(kept.clone());
        assert_eq!(again, kept);
        assert_eq!(summary.retained_series, kept.len());
    }
}
