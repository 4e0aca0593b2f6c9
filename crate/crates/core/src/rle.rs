//! Lossless run-length encoding of binary series and conversion of runs
//! into two-state survival episodes.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::cox::{SurvivalData, SurvivalRecord, Transition};
use crate::error::{Error, Result};
use crate::ingest::{ClusterKey, Conditions, TrialSeries};

/// One maximal run of identical samples within a trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEpisode {
    pub key: ClusterKey,
    pub conditions: Conditions,
    /// 1-based position of the run within its trial.
    pub run_index: u32,
    pub state: u8,
    pub length: u32,
    pub start_time: f64,
    pub stop_time: f64,
    /// 1 when a switch to the opposite state ends the run.
    pub event: u8,
}

/// Encodes a series as alternating runs. Stop times are cumulative sample
/// counts times the bin width; the final run carries `event = 0`.
pub fn rle_encode(series: &TrialSeries) -> Result<Vec<RunEpisode>> {
    let samples = &series.samples;
    if samples.is_empty() {
        return Err(Error::EmptyInput(format!("series {} has no samples", series.key)));
    }
    let mut runs = Vec::new();
    let mut begin = 0usize;
    for i in 1..=samples.len() {
        if i == samples.len() || samples[i] != samples[begin] {
            runs.push(RunEpisode {
                key: series.key.clone(),
                conditions: series.conditions,
                run_index: runs.len() as u32 + 1,
                state: samples[begin],
                length: (i - begin) as u32,
                start_time: begin as f64 * series.bin_seconds,
                stop_time: i as f64 * series.bin_seconds,
                event: u8::from(i < samples.len()),
            });
            begin = i;
        }
    }
    Ok(runs)
}

/// Reconstructs the series encoded by [`rle_encode`], checking that runs
/// alternate and tile the time axis.
pub fn rle_decode(episodes: &[RunEpisode], bin_seconds: f64) -> Result<TrialSeries> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::EmptyInput("no run episodes to decode".into()))?;
    if !(bin_seconds > 0.0) {
        return Err(Error::Domain(format!(
            "bin_seconds must be positive, got {bin_seconds}"
        )));
    }
    let tol = |scale: f64| 1e-9 * scale.abs().max(1.0);
    let mut samples = Vec::with_capacity(episodes.iter().map(|e| e.length as usize).sum());
    let mut clock = 0.0f64;
    for (k, ep) in episodes.iter().enumerate() {
        if ep.key != first.key {
            return Err(Error::Structure(format!(
                "run {} belongs to {} but the trial is {}",
                k + 1,
                ep.key,
                first.key
            )));
        }
        if ep.state > 1 || ep.length == 0 {
            return Err(Error::Structure(format!(
                "run {} of {} has state {} and length {}",
                k + 1,
                ep.key,
                ep.state,
                ep.length
            )));
        }
        if k > 0 && ep.state == episodes[k - 1].state {
            return Err(Error::Structure(format!(
                "runs {} and {} of {} do not alternate state",
                k,
                k + 1,
                ep.key
            )));
        }
        if (ep.start_time - clock).abs() > tol(clock) {
            return Err(Error::Structure(format!(
                "run {} of {} starts at {} but the previous run stops at {}",
                k + 1,
                ep.key,
                ep.start_time,
                clock
            )));
        }
        let span = ep.length as f64 * bin_seconds;
        if (ep.stop_time - ep.start_time - span).abs() > tol(ep.stop_time) {
            return Err(Error::Structure(format!(
                "run {} of {} spans {} s but has {} samples of {} s",
                k + 1,
                ep.key,
                ep.stop_time - ep.start_time,
                ep.length,
                bin_seconds
            )));
        }
        samples.extend(std::iter::repeat_n(ep.state, ep.length as usize));
        clock = ep.stop_time;
    }
    Ok(TrialSeries {
        key: first.key.clone(),
        conditions: first.conditions,
        bin_seconds,
        samples,
    })
}

/// Survival records built from runs, together with the final runs that
/// were set aside because no transition ends them.
#[derive(Clone, Debug)]
pub struct SurvivalTable {
    pub data: SurvivalData,
    pub dropped: Vec<RunEpisode>,
}

/// Covariate names of the standard two-state hazard model.
pub const COX_COVARIATES: [&str; 4] = ["Privileged", "Contrast", "Privileged:to_target", "Contrast:to_target"];

/// Converts each trial's runs into (start, stop] records, dropping the last
/// run of every trial. A run in state 1 ends with a 1→0 transition and a run
/// in state 0 with a 0→1 transition.
pub fn episodes_to_survival(trials: &[Vec<RunEpisode>]) -> SurvivalTable {
    let mut records = Vec::new();
    let mut dropped = Vec::new();
    for runs in trials {
        let Some((last, body)) = runs.split_last() else {
            continue;
        };
        for ep in body {
            let stratum = if ep.state == 1 {
                Transition::FromTarget
            } else {
                Transition::ToTarget
            };
            let to_target = f64::from(u8::from(stratum == Transition::ToTarget));
            let priv_ = f64::from(ep.conditions.privileged);
            let contrast = f64::from(ep.conditions.contrast);
            records.push(SurvivalRecord {
                start: ep.start_time,
                stop: ep.stop_time,
                event: 1,
                stratum,
                covariates: vec![priv_, contrast, priv_ * to_target, contrast * to_target],
                cluster_key: ep.key.clone(),
            });
        }
        dropped.push(last.clone());
    }
    SurvivalTable {
        data: SurvivalData {
            names: COX_COVARIATES.iter().map(|s| s.to_string()).collect(),
            records,
        },
        dropped,
    }
}

/// Encodes every series in order.
pub fn encode_all(series: &[TrialSeries]) -> Result<Vec<Vec<RunEpisode>>> {
    series.iter().map(rle_encode).collect()
}

const EPISODE_COLUMNS: [&str; 10] = [
    "subject",
    "item",
    "run",
    "state",
    "length",
    "start",
    "stop",
    "event",
    "contrast",
    "privileged",
];

/// Writes the episode file: a `# bin_seconds=<b>` comment line, then a
/// header and one row per run.
pub fn write_episode_file<W: Write>(writer: W, bin_seconds: f64, episodes: &[RunEpisode]) -> Result<()> {
    write_episode_file_with_notes(writer, bin_seconds, episodes, &[])
}

/// Like [`write_episode_file`], with extra `# key=value` comment lines
/// after the bin width.
pub fn write_episode_file_with_notes<W: Write>(
    mut writer: W,
    bin_seconds: f64,
    episodes: &[RunEpisode],
    notes: &[(&str, &str)],
) -> Result<()> {
    writeln!(writer, "# bin_seconds={bin_seconds}")?;
    for (k, v) in notes {
        writeln!(writer, "# {k}={v}")?;
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EPISODE_COLUMNS)?;
    for ep in episodes {
        w.write_record([
            ep.key.subject.clone(),
            ep.key.item.clone(),
            ep.run_index.to_string(),
            ep.state.to_string(),
            ep.length.to_string(),
            format!("{}", ep.start_time),
            format!("{}", ep.stop_time),
            ep.event.to_string(),
            ep.conditions.contrast.to_string(),
            ep.conditions.privileged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an episode file. The `contrast`/`privileged` columns are optional
/// and default to 0 when absent.
pub fn read_episode_file<R: Read>(reader: R) -> Result<(f64, Vec<RunEpisode>)> {
    let mut buf = BufReader::new(reader);
    let mut first = String::new();
    buf.read_line(&mut first)?;
    let bin_seconds = first
        .trim()
        .strip_prefix('#')
        .and_then(|s| s.trim().strip_prefix("bin_seconds="))
        .and_then(|v| v.trim().parse::<f64>().ok())
        .ok_or_else(|| Error::Parse {
            row: 0,
            message: "episode file must start with `# bin_seconds=<value>`".into(),
        })?;

    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(buf);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 8];
    for (slot, name) in idx.iter_mut().zip(&EPISODE_COLUMNS[..8]) {
        *slot = col(name).ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let contrast_col = col("contrast");
    let privileged_col = col("privileged");

    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let get = |k: usize| row.get(k).unwrap_or("");
        let parse_err = |name: &str, v: &str| Error::Parse {
            row: row_no,
            message: format!("bad value `{v}` in column `{name}`"),
        };
        let num = |k: usize, name: &str| -> Result<f64> { get(k).parse::<f64>().map_err(|_| parse_err(name, get(k))) };
        let int = |k: usize, name: &str| -> Result<u32> { get(k).parse::<u32>().map_err(|_| parse_err(name, get(k))) };
        let bit = |k: Option<usize>, name: &str| -> Result<u8> {
            match k.map(get) {
                None => Ok(0),
                Some("0") => Ok(0),
                Some("1") => Ok(1),
                Some(v) => Err(parse_err(name, v)),
            }
        };
        out.push(RunEpisode {
            key: ClusterKey::new(get(idx[0]), get(idx[1])),
            run_index: int(idx[2], "run")?,
            state: bit(Some(idx[3]), "state")?,
            length: int(idx[4], "length")?,
            start_time: num(idx[5], "start")?,
            stop_time: num(idx[6], "stop")?,
            event: bit(Some(idx[7]), "event")?,
            conditions: Conditions {
                contrast: bit(contrast_col, "contrast")?,
                privileged: bit(privileged_col, "privileged")?,
            },
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("episode file has no runs".into()));
    }
    Ok((bin_seconds, out))
}

/// Splits a flat episode list into per-trial groups (consecutive rows with
/// the same key).
pub fn group_episodes(episodes: Vec<RunEpisode>) -> Vec<Vec<RunEpisode>> {
    let mut out: Vec<Vec<RunEpisode>> = Vec::new();
    for ep in episodes {
        match out.last_mut() {
            Some(group) if group[0].key == ep.key => group.push(ep),
            _ => out.push(vec![ep]),
        }
    }
    out
}
