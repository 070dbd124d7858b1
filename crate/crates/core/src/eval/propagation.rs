//! Per-step severity matrix for the error-propagation figure.
//!
//! Before the critical step a cell is `error` when any module flagged an
//! error there. The critical step itself is `first_critical` and every
//! later step is `post_critical`, whatever the raw detections say. The
//! profiles keep the raw data for other renderings.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{EvalError, Prediction};
use crate::debug::ErrorProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Clean = 0,
    Error = 1,
    FirstCritical = 2,
    PostCritical = 3,
}

impl Severity {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Severity::Clean,
            1 => Severity::Error,
            2 => Severity::FirstCritical,
            3 => Severity::PostCritical,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationRow {
    pub trajectory_id: String,
    /// One cell per step of this trajectory.
    pub cells: Vec<Severity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationMatrix {
    /// Sorted by trajectory id.
    pub rows: Vec<PropagationRow>,
}

impl PropagationMatrix {
    pub fn columns(&self) -> usize {
        self.rows.iter().map(|r| r.cells.len()).max().unwrap_or(0)
    }

    /// Header `trajectory_id,step_1..step_N`; cells past a row's own
    /// length are left empty.
    pub fn to_csv(&self) -> String {
        let n = self.columns();
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let header: Vec<String> = std::iter::once("trajectory_id".to_string())
            .chain((1..=n).map(|i| format!("step_{i}")))
            .collect();
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![row.trajectory_id.clone()];
            rec.extend(row.cells.iter().map(|c| c.code().to_string()));
            rec.resize(n + 1, String::new());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    /// At most one `first_critical` per row, with `post_critical` only
    /// after it.
    pub fn check(&self) -> Result<(), String> {
        for row in &self.rows {
            let firsts: Vec<usize> = positions(&row.cells, Severity::FirstCritical);
            if firsts.len() > 1 {
                return Err(format!("{}: {} first_critical cells", row.trajectory_id, firsts.len()));
            }
            let boundary = firsts.first().copied();
            for p in positions(&row.cells, Severity::PostCritical) {
                if boundary.is_none_or(|b| p <= b) {
                    return Err(format!("{}: post_critical at step {}", row.trajectory_id, p + 1));
                }
            }
        }
        Ok(())
    }
}

fn positions(cells: &[Severity], s: Severity) -> Vec<usize> {
    cells.iter().enumerate().filter(|(_, c)| **c == s).map(|(i, _)| i).collect()
}

/// Rows follow trajectory id order. A trajectory's length is the largest
/// step its profile covers.
pub fn propagation_matrix(
    profiles: &[ErrorProfile],
    diagnoses: &[Prediction],
) -> Result<PropagationMatrix, EvalError> {
    let mut by_id: BTreeMap<&str, &ErrorProfile> = BTreeMap::new();
    for p in profiles {
        if p.trajectory_id.contains([',', '"', '\n', '\r']) {
            return Err(EvalError::InconsistentIds(format!("unusable id {:?}", p.trajectory_id)));
        }
        if by_id.insert(&p.trajectory_id, p).is_some() {
            return Err(EvalError::InconsistentIds(format!("two profiles for {}", p.trajectory_id)));
        }
    }
    let mut critical: BTreeMap<&str, u32> = BTreeMap::new();
    for d in diagnoses {
        if !by_id.contains_key(d.trajectory_id.as_str()) {
            return Err(EvalError::InconsistentIds(format!("diagnosis for unknown {}", d.trajectory_id)));
        }
        if critical.insert(&d.trajectory_id, d.diagnosis.critical_step).is_some() {
            return Err(EvalError::InconsistentIds(format!("two diagnoses for {}", d.trajectory_id)));
        }
    }
    let mut rows = Vec::with_capacity(by_id.len());
    for (id, profile) in by_id {
        let t = profile.detections.iter().map(|d| d.step).max().unwrap_or(0);
        let flagged: BTreeSet<u32> = profile.error_steps().into_iter().collect();
        let star = critical.get(id).copied();
        if let Some(s) = star {
            if s == 0 || s > t {
                return Err(EvalError::InconsistentIds(format!("{id}: critical step {s} outside 1..={t}")));
            }
        }
        let cells = (1..=t)
            .map(|step| match star {
                Some(s) if step == s => Severity::FirstCritical,
                Some(s) if step > s => Severity::PostCritical,
                _ if flagged.contains(&step) => Severity::Error,
                _ => Severity::Clean,
            })
            .collect();
        rows.push(PropagationRow {
            trajectory_id: id.to_string(),
            cells,
        });
    }
    Ok(PropagationMatrix { rows })
}

/// Inverse of [`PropagationMatrix::to_csv`].
pub fn parse_csv(text: &str) -> Result<PropagationMatrix, EvalError> {
    let bad = |detail: String| EvalError::SchemaViolation {
        index: None,
        path: "csv".into(),
        detail,
    };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let expected: Vec<String> = std::iter::once("trajectory_id".to_string())
        .chain((1..header.len()).map(|i| format!("step_{i}")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(bad("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let mut cells = Vec::new();
        let mut ended = false;
        for field in rec.iter().skip(1) {
            if field.is_empty() {
                ended = true;
                continue;
            }
            let code = field
                .parse::<u8>()
                .ok()
                .and_then(Severity::from_code)
                .filter(|_| !ended)
                .ok_or_else(|| bad(format!("row {i}: bad cell {field:?}")))?;
            cells.push(code);
        }
        rows.push(PropagationRow {
            trajectory_id: rec[0].to_string(),
            cells,
        });
    }
    Ok(PropagationMatrix { rows })
}
