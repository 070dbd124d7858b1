//! Benchmark file schema v1: a JSON array of `{dataset, trajectory,
//! annotation}` items. `dataset` defaults to "default".

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::debug::CriticalDiagnosis;
use crate::model::{ModuleKind, Trajectory};
use crate::taxonomy::ErrorLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldAnnotation {
    pub trajectory_id: String,
    pub critical_step: u32,
    pub module: ModuleKind,
    pub error_label: ErrorLabel,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkItem {
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub trajectory: Trajectory,
    pub annotation: GoldAnnotation,
}

fn default_dataset() -> String {
    "default".into()
}

/// A method's localization for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub trajectory_id: String,
    pub diagnosis: CriticalDiagnosis,
}

fn violation(index: usize, path: &str, detail: impl Into<String>) -> EvalError {
    EvalError::SchemaViolation {
        index: Some(index),
        path: path.into(),
        detail: detail.into(),
    }
}

impl BenchmarkItem {
    fn check(&self, index: usize) -> Result<(), EvalError> {
        if let Some(v) = self.trajectory.validate().into_iter().next() {
            return Err(violation(index, "trajectory", v.to_string()));
        }
        let a = &self.annotation;
        if a.trajectory_id != self.trajectory.task_id {
            return Err(violation(
                index,
                "annotation.trajectory_id",
                format!("{} but trajectory is {}", a.trajectory_id, self.trajectory.task_id),
            ));
        }
        let t = self.trajectory.len() as u32;
        if a.critical_step == 0 || a.critical_step > t {
            return Err(violation(
                index,
                "annotation.critical_step",
                format!("{} outside 1..={t}", a.critical_step),
            ));
        }
        if a.error_label.module != a.module {
            return Err(violation(
                index,
                "annotation.error_label.module",
                format!("{} under module {}", a.error_label, a.module),
            ));
        }
        if a.error_label.is_no_error() {
            return Err(violation(index, "annotation.error_label.error_type", "gold label is no_error"));
        }
        Ok(())
    }
}

/// Parses and validates the whole file; any bad item rejects all of it.
pub fn parse_benchmark(text: &str) -> Result<Vec<BenchmarkItem>, EvalError> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| EvalError::SchemaViolation {
        index: None,
        path: "$".into(),
        detail: e.to_string(),
    })?;
    let mut items = Vec::with_capacity(raw.len());
    let mut ids = std::collections::BTreeSet::new();
    for (i, value) in raw.into_iter().enumerate() {
        let item: BenchmarkItem = serde_path_to_error::deserialize(value)
            .map_err(|e| violation(i, &e.path().to_string(), e.inner().to_string()))?;
        item.check(i)?;
        if !ids.insert(item.annotation.trajectory_id.clone()) {
            return Err(violation(i, "annotation.trajectory_id", "duplicate id"));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkItem>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    parse_benchmark(&text)
}
