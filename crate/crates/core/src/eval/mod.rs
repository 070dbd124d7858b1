//! Benchmark ingestion, localization accuracy, success curves, and the
//! error-propagation export.

pub mod benchmark;
pub mod metrics;
pub mod propagation;

use thiserror::Error;

pub use benchmark::{load_benchmark, parse_benchmark, BenchmarkItem, GoldAnnotation, Prediction};
pub use metrics::{
    compute_detection_metrics, format_percent, macro_average, match_prediction, micro_average,
    render_table, success_rate_curve, DatasetReport, DetectionMetrics, MatchLevel, MetricsReport,
};
pub use propagation::{parse_csv, propagation_matrix, PropagationMatrix, PropagationRow, Severity};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("schema violation{} at {path}: {detail}", index.map(|i| format!(" in item {i}")).unwrap_or_default())]
    SchemaViolation {
        index: Option<usize>,
        path: String,
        detail: String,
    },
    #[error("prediction for {predicted} does not match gold {gold}")]
    IdMismatch { predicted: String, gold: String },
    #[error("empty input set")]
    EmptySet,
    #[error("inconsistent trajectory ids: {0}")]
    InconsistentIds(String),
    #[error("io: {0}")]
    Io(String),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::SchemaViolation { .. } => "SchemaViolation",
            EvalError::IdMismatch { .. } => "IdMismatch",
            EvalError::EmptySet => "EmptySet",
            EvalError::InconsistentIds(_) => "InconsistentIds",
            EvalError::Io(_) => "Io",
        }
    }
}
