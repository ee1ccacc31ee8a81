//! JSON MDP files.
//!
//! ```json
//! {"n_states": 2, "n_actions": 1,
//!  "transition":  [[[0.0, 1.0]], [[0.0, 1.0]]],
//!  "reward_mean": [[[0.0, 0.0]], [[0.0, 1.0]]],
//!  "reward_std":  [[[0.0, 0.0]], [[0.0, 0.1]]],
//!  "zeta": [1.0, 0.0], "horizon": 4}
//! ```
//!
//! Nested tables are indexed `[s][a][s']`. Transition rows must sum to one
//! within `1e-9`.

use std::fs;
use std::path::{Path, PathBuf};

use conserva_core::envs::Environment;
use conserva_core::mdp::{ModelTag, TabularModel, ROW_TOLERANCE};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed MDP file: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("bad dimensions: {0}")]
    Shape(String),
    #[error("transition row (s={s}, a={a}) sums to {sum}, not 1")]
    RowSum { s: usize, a: usize, sum: f64 },
    #[error("transition row (s={s}, a={a}) has negative or non-finite entry {value}")]
    BadProbability { s: usize, a: usize, value: f64 },
    #[error(transparent)]
    Invalid(#[from] conserva_core::Error),
}

type Table3 = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Table3,
    pub reward_mean: Table3,
    pub reward_std: Table3,
    pub zeta: Vec<f64>,
    pub horizon: usize,
}

fn nest(flat: &[f64], n_states: usize, n_actions: usize) -> Table3 {
    flat.chunks(n_actions * n_states)
        .map(|per_state| per_state.chunks(n_states).map(<[f64]>::to_vec).collect())
        .collect()
}

fn flatten(name: &str, table: &Table3, n_states: usize, n_actions: usize) -> Result<Vec<f64>, LoadError> {
    if table.len() != n_states {
        return Err(LoadError::Shape(format!("{name} has {} states, expected {n_states}", table.len())));
    }
    let mut flat = Vec::with_capacity(n_states * n_actions * n_states);
    for (s, per_state) in table.iter().enumerate() {
        if per_state.len() != n_actions {
            return Err(LoadError::Shape(format!(
                "{name}[{s}] has {} actions, expected {n_actions}",
                per_state.len()
            )));
        }
        for (a, row) in per_state.iter().enumerate() {
            if row.len() != n_states {
                return Err(LoadError::Shape(format!(
                    "{name}[{s}][{a}] has {} entries, expected {n_states}",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
        }
    }
    Ok(flat)
}

impl MdpFile {
    pub fn from_env(env: &Environment) -> Self {
        let (ns, na) = (env.n_states(), env.n_actions());
        Self {
            n_states: ns,
            n_actions: na,
            transition: nest(env.model().transitions(), ns, na),
            reward_mean: nest(env.model().reward_means(), ns, na),
            reward_std: nest(env.reward_std(), ns, na),
            zeta: env.zeta().to_vec(),
            horizon: env.horizon(),
        }
    }

    pub fn into_env(self) -> Result<Environment, LoadError> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(LoadError::Shape("n_states and n_actions must be positive".into()));
        }
        let transition = flatten("transition", &self.transition, ns, na)?;
        let reward_mean = flatten("reward_mean", &self.reward_mean, ns, na)?;
        let reward_std = flatten("reward_std", &self.reward_std, ns, na)?;
        for (i, row) in transition.chunks(ns).enumerate() {
            let (s, a) = (i / na, i % na);
            if let Some(&value) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
                return Err(LoadError::BadProbability { s, a, value });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(LoadError::RowSum { s, a, sum });
            }
        }
        let model = TabularModel::new(ns, na, transition, reward_mean, ModelTag::TrueEnv)?;
        Ok(Environment::new(model, reward_std, self.zeta, self.horizon)?)
    }
}

pub fn load_mdp(path: impl AsRef<Path>) -> Result<Environment, LoadError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.into(), source })?;
    let file: MdpFile =
        serde_json::from_str(&text).map_err(|source| LoadError::Parse { path: path.into(), source })?;
    file.into_env()
}

pub fn save_mdp(env: &Environment, path: impl AsRef<Path>) -> Result<(), LoadError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&MdpFile::from_env(env)).expect("MDP tables serialize");
    fs::write(path, text).map_err(|source| LoadError::Io { path: path.into(), source })
}
