//! Human-editable task manifests.
//!
//! ```toml
//! [[task]]
//! name = "mul2"
//! formula = "x1*x2"
//! ranges = [[1.0, 5.0], [1.0, 5.0]]
//! count = 2000          # optional
//! layers = 3            # optional, default arity + 1
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::sampling::Task;

use super::BenchError;

pub const DEFAULT_COUNT: usize = 2000;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    name: String,
    formula: String,
    ranges: Vec<(f64, f64)>,
    count: Option<usize>,
    layers: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(default)]
    task: Vec<TaskEntry>,
}

pub fn parse_suite(text: &str) -> Result<Vec<Task>, BenchError> {
    let m: Manifest = toml::from_str(text).map_err(|e| BenchError::Suite(e.to_string()))?;
    let mut out = Vec::with_capacity(m.task.len());
    for e in m.task {
        if out.iter().any(|t: &Task| t.name == e.name) {
            return Err(BenchError::Suite(format!("duplicate task name {}", e.name)));
        }
        let mut t = Task::new(&e.name, &e.formula, e.ranges, e.count.unwrap_or(DEFAULT_COUNT))?;
        t.layers = e.layers;
        out.push(t);
    }
    Ok(out)
}

pub fn load_suite(path: &Path) -> Result<Vec<Task>, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Suite(format!("{}: {e}", path.display())))?;
    parse_suite(&text)
}

/// The ten-task desk suite.
pub const DESK_SUITE: &str = include_str!("../../suites/desk.toml");

pub fn desk_suite() -> Vec<Task> {
    parse_suite(DESK_SUITE).expect("built-in suite is valid")
}
