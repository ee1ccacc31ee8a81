//! On-disk formats of a run: `trace.csv`, `snapshots.jsonl` and `config.json`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use conserva_core::bayes::QSnapshot;
use serde::{Deserialize, Serialize};

pub const TRACE_FILE: &str = "trace.csv";
pub const SNAPSHOT_FILE: &str = "snapshots.jsonl";
pub const CONFIG_FILE: &str = "config.json";
/// Present when a run aborted; holds the error message.
pub const PARTIAL_MARKER: &str = "PARTIAL";

const TRACE_HEADER: [&str; 6] = ["iter", "per_iter_regret", "cum_regret", "delta_t", "max_state_tv", "wall_ms"];

/// One row of `trace.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub per_iter_regret: f64,
    pub cum_regret: f64,
    pub delta_t: Option<f64>,
    pub max_state_tv: Option<f64>,
    pub wall_ms: f64,
    /// Only written when the run probes the ensemble width.
    #[serde(default)]
    pub width: Option<f64>,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the trace; the `width` column is appended when `with_width` is set.
pub fn write_trace(path: &Path, rows: &[TraceRow], with_width: bool) -> Result<()> {
    let mut out = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = TRACE_HEADER.to_vec();
    if with_width {
        header.push("width");
    }
    out.write_record(&header)?;
    for row in rows {
        let mut record = vec![
            row.iter.to_string(),
            row.per_iter_regret.to_string(),
            row.cum_regret.to_string(),
            cell(row.delta_t),
            cell(row.max_state_tv),
            row.wall_ms.to_string(),
        ];
        if with_width {
            record.push(cell(row.width));
        }
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .map(|row| row.with_context(|| format!("parsing {}", path.display())))
        .collect()
}

/// First line of `snapshots.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub kind: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub snapshot_every: usize,
    pub samples: usize,
    pub iterations: usize,
}

impl SnapshotHeader {
    pub fn new(n_states: usize, n_actions: usize, snapshot_every: usize, samples: usize, iterations: usize) -> Self {
        Self { kind: "header".into(), n_states, n_actions, snapshot_every, samples, iterations }
    }
}

/// One `(iteration, s, a)` line of `snapshots.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRecord {
    pub t: usize,
    pub s: usize,
    pub a: usize,
    pub mean_q: f64,
    pub std_q: f64,
    pub n_obs: u64,
}

pub fn snapshot_records(snapshot: &QSnapshot) -> impl Iterator<Item = SnapshotRecord> + '_ {
    (0..snapshot.n_states).flat_map(move |s| {
        (0..snapshot.n_actions).map(move |a| SnapshotRecord {
            t: snapshot.iteration,
            s,
            a,
            mean_q: snapshot.mean(s, a),
            std_q: snapshot.std(s, a),
            n_obs: snapshot.n_obs[s * snapshot.n_actions + a],
        })
    })
}

/// Writes the header line followed by every snapshot's records.
pub fn write_snapshots(path: &Path, header: &SnapshotHeader, snapshots: &[QSnapshot]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for snapshot in snapshots {
        for record in snapshot_records(snapshot) {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_snapshots(path: &Path) -> Result<(SnapshotHeader, Vec<SnapshotRecord>)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines.next().context("snapshot file is empty")??;
    let header: SnapshotHeader = serde_json::from_str(&header_line)?;
    let mut records = Vec::new();
    for line in lines {
        records.push(serde_json::from_str(&line?)?);
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_round_trip_with_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRACE_FILE);
        let rows = vec![
            TraceRow { iter: 1, per_iter_regret: 0.5, cum_regret: 0.5, delta_t: None, max_state_tv: Some(0.2), wall_ms: 1.25, width: None },
            TraceRow { iter: 2, per_iter_regret: 0.1, cum_regret: 0.6, delta_t: Some(0.0), max_state_tv: None, wall_ms: 0.0, width: None },
        ];
        write_trace(&path, &rows, false).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iter,per_iter_regret,cum_regret,delta_t,max_state_tv,wall_ms\n1,0.5,0.5,,0.2,1.25\n"));
        assert_eq!(read_trace(&path).unwrap(), rows);
    }

    #[test]
    fn width_column_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRACE_FILE);
        let rows = vec![TraceRow { iter: 1, per_iter_regret: 0.0, cum_regret: 0.0, delta_t: None, max_state_tv: None, wall_ms: 0.0, width: Some(1.5) }];
        write_trace(&path, &rows, true).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().lines().next().unwrap().ends_with(",width"));
        assert_eq!(read_trace(&path).unwrap(), rows);
    }

    #[test]
    fn header_only_snapshot_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(SNAPSHOT_FILE);
        write_snapshots(&path, &SnapshotHeader::new(3, 2, 10, 20, 5), &[]).unwrap();
        let (header, records) = read_snapshots(&path).unwrap();
        assert_eq!(header.kind, "header");
        assert!(records.is_empty());
    }
}
