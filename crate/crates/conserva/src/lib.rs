//! Harness, persistence and command line for the conserva exploration lab.
//!
//! The algorithms live in [`conserva_core`]; this crate adds what needs `std`:
//!
//! - [`mdp_file`]: the JSON MDP schema (`load_mdp` / `save_mdp`).
//! - [`config`]: experiment and sweep configuration files.
//! - [`output`]: trace CSV and posterior-snapshot JSONL formats.
//! - [`harness`]: `run_experiment`, `sweep` and `report`.

pub mod config;
pub mod harness;
pub mod mdp_file;
pub mod output;

