//! Running single experiments, parallel sweeps and aggregate reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use conserva_core::bayes::QSnapshot;
use conserva_core::experiment::ExperimentRun;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::output::{self, SnapshotHeader, TraceRow, CONFIG_FILE, PARTIAL_MARKER, SNAPSHOT_FILE, TRACE_FILE};

pub const AGGREGATE_FILE: &str = "aggregate.csv";

/// Everything produced by one run, kept in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<TraceRow>,
    pub snapshots: Vec<QSnapshot>,
    pub n_states: usize,
    pub n_actions: usize,
    /// Set when the run stopped early; `rows` then holds the completed prefix.
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn final_cum_regret(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_regret)
    }
}

/// Runs `config` without touching the filesystem (apart from loading an MDP file).
///
/// Setup failures are returned as errors. Failures during the loop are kept
/// in [`RunOutcome::error`] so the completed prefix is not lost.
pub fn execute(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let (env, prior) = config.resolve()?;
    let mut run = ExperimentRun::new(env, config.resolved_agent(), prior, config.seed)?;
    if let Some((s, a)) = config.width_at {
        run = run.with_width_probe(s, a)?;
    }
    let mut outcome = RunOutcome {
        rows: Vec::with_capacity(config.iterations),
        snapshots: Vec::new(),
        n_states: run.env().n_states(),
        n_actions: run.env().n_actions(),
        error: None,
    };
    for _ in 0..config.iterations {
        let start = Instant::now();
        let record = match run.step() {
            Ok(record) => record,
            Err(e) => {
                outcome.error = Some(e.to_string());
                break;
            }
        };
        let wall_ms = if config.record_timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        outcome.rows.push(TraceRow {
            iter: record.iteration,
            per_iter_regret: record.regret,
            cum_regret: record.cum_regret,
            delta_t: record.delta_t,
            max_state_tv: record.max_state_tv,
            wall_ms,
            width: record.width,
        });
        if config.snapshot_every > 0 && record.iteration % config.snapshot_every == 0 {
            match run.snapshot(config.snapshot_samples) {
                Ok(snapshot) => outcome.snapshots.push(snapshot),
                Err(e) => {
                    outcome.error = Some(e.to_string());
                    break;
                }
            }
        }
    }
    Ok(outcome)
}

/// Runs `config` and writes its output directory.
///
/// A run that fails part-way still writes what it has, plus a `PARTIAL`
/// file containing the error, and then returns the error.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let _ = fs::remove_file(dir.join(PARTIAL_MARKER));
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;

    let outcome = execute(config)?;
    output::write_trace(&dir.join(TRACE_FILE), &outcome.rows, config.width_at.is_some())?;
    if config.snapshot_every > 0 {
        let header = SnapshotHeader::new(
            outcome.n_states,
            outcome.n_actions,
            config.snapshot_every,
            config.snapshot_samples,
            config.iterations,
        );
        output::write_snapshots(&dir.join(SNAPSHOT_FILE), &header, &outcome.snapshots)?;
    }
    if let Some(err) = &outcome.error {
        fs::write(dir.join(PARTIAL_MARKER), err)?;
        anyhow::bail!("run in {} stopped after {} iterations: {err}", dir.display(), outcome.rows.len());
    }
    info!("{}: final cumulative regret {:.4}", dir.display(), outcome.final_cum_regret());
    Ok(outcome)
}

/// Result of one sweep cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub env: String,
    pub agent: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub final_cum_regret: Result<f64, String>,
}

/// One line of `aggregate.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub env: String,
    pub agent: String,
    pub runs: usize,
    pub failures: usize,
    pub mean_cum_regret: f64,
    pub std_cum_regret: f64,
    /// Mean divided by the largest mean among agents on the same environment.
    pub normalized_regret: f64,
}

/// Groups cells by `(env, agent)`. Failed cells are counted but excluded
/// from the statistics.
pub fn aggregate(cells: &[CellResult]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String), (Vec<f64>, usize)> = BTreeMap::new();
    for cell in cells {
        let entry = groups.entry((cell.env.clone(), cell.agent.clone())).or_default();
        match &cell.final_cum_regret {
            Ok(x) => entry.0.push(*x),
            Err(_) => entry.1 += 1,
        }
    }
    let mut rows: Vec<AggregateRow> = groups
        .into_iter()
        .map(|((env, agent), (values, failures))| {
            let n = values.len();
            let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
            let std = if n < 2 {
                0.0
            } else {
                (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            AggregateRow {
                env,
                agent,
                runs: n,
                failures,
                mean_cum_regret: mean,
                std_cum_regret: std,
                normalized_regret: f64::NAN,
            }
        })
        .collect();

    let mut env_max: BTreeMap<String, f64> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.runs > 0) {
        let m = env_max.entry(row.env.clone()).or_insert(f64::NEG_INFINITY);
        *m = m.max(row.mean_cum_regret);
    }
    for row in &mut rows {
        if row.runs == 0 {
            continue;
        }
        let max = env_max[&row.env];
        row.normalized_regret = if max > 0.0 { row.mean_cum_regret / max } else { 1.0 };
    }
    rows
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut out = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

/// Runs every config on a pool of `jobs` threads (0 means one per core) and
/// writes `aggregate.csv` into `output_dir`.
pub fn sweep(configs: &[ExperimentConfig], jobs: usize, output_dir: &Path) -> Result<(Vec<CellResult>, Vec<AggregateRow>)> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let cells: Vec<CellResult> = pool.install(|| {
        configs
            .par_iter()
            .map(|cfg| {
                let result = run_experiment(cfg).map(|o| o.final_cum_regret()).map_err(|e| {
                    warn!("{}: {e:#}", cfg.output_dir.display());
                    format!("{e:#}")
                });
                CellResult {
                    env: cfg.env.label(),
                    agent: cfg.agent.kind.cli_name().to_string(),
                    seed: cfg.seed,
                    output_dir: cfg.output_dir.clone(),
                    final_cum_regret: result,
                }
            })
            .collect()
    });
    let rows = aggregate(&cells);
    fs::create_dir_all(output_dir)?;
    write_aggregate(&output_dir.join(AGGREGATE_FILE), &rows)?;
    Ok((cells, rows))
}

fn find_run_dirs(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join(CONFIG_FILE).is_file() {
        found.push(dir.to_path_buf());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for child in children {
        find_run_dirs(&child, found)?;
    }
    Ok(())
}

/// Re-aggregates every run directory below `dir` and writes `dir/aggregate.csv`.
/// Runs without a trace, or marked `PARTIAL`, count as failures.
pub fn report(dir: &Path) -> Result<Vec<AggregateRow>> {
    let mut run_dirs = Vec::new();
    find_run_dirs(dir, &mut run_dirs)?;
    let mut cells = Vec::with_capacity(run_dirs.len());
    for run_dir in run_dirs {
        let cfg = ExperimentConfig::from_path(&run_dir.join(CONFIG_FILE))?;
        let trace_path = run_dir.join(TRACE_FILE);
        let result = if run_dir.join(PARTIAL_MARKER).exists() {
            Err("partial run".to_string())
        } else if !trace_path.is_file() {
            Err("missing trace".to_string())
        } else {
            match output::read_trace(&trace_path) {
                Ok(rows) => rows.last().map(|r| r.cum_regret).ok_or_else(|| "empty trace".to_string()),
                Err(e) => Err(format!("{e:#}")),
            }
        };
        cells.push(CellResult {
            env: cfg.env.label(),
            agent: cfg.agent.kind.cli_name().to_string(),
            seed: cfg.seed,
            output_dir: run_dir,
            final_cum_regret: result,
        });
    }
    let rows = aggregate(&cells);
    write_aggregate(&dir.join(AGGREGATE_FILE), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(env: &str, agent: &str, r: Result<f64, String>) -> CellResult {
        CellResult { env: env.into(), agent: agent.into(), seed: 0, output_dir: PathBuf::new(), final_cum_regret: r }
    }

    #[test]
    fn aggregate_statistics() {
        let cells = vec![
            cell("a", "cdpo", Ok(1.0)),
            cell("a", "cdpo", Ok(3.0)),
            cell("a", "psrl", Ok(4.0)),
            cell("a", "psrl", Err("boom".into())),
            cell("b", "cdpo", Ok(0.0)),
        ];
        let rows = aggregate(&cells);
        assert_eq!(rows.len(), 3);
        let cdpo = &rows[0];
        assert_eq!((cdpo.runs, cdpo.failures), (2, 0));
        assert_eq!(cdpo.mean_cum_regret, 2.0);
        assert!((cdpo.std_cum_regret - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(cdpo.normalized_regret, 0.5);
        let psrl = &rows[1];
        assert_eq!((psrl.runs, psrl.failures, psrl.std_cum_regret, psrl.normalized_regret), (1, 1, 0.0, 1.0));
        assert_eq!(rows[2].normalized_regret, 1.0);
    }
}
