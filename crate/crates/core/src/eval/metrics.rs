//! Nested localization accuracy (Step, Step+Module, All) plus a
//! type-only score. Fractions are exact; rounding happens only for display.

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use super::{EvalError, GoldAnnotation, Prediction};
use crate::debug::{CriticalDiagnosis, DebugResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLevel {
    None,
    Step,
    StepModule,
    All,
}

/// Step is the gate: a wrong step is `None` whatever the label says.
pub fn match_prediction(pred: &CriticalDiagnosis, gold: &GoldAnnotation) -> MatchLevel {
    if pred.critical_step != gold.critical_step {
        MatchLevel::None
    } else if pred.critical_module != gold.module {
        MatchLevel::Step
    } else if pred.error_label.error_type != gold.error_label.error_type {
        MatchLevel::StepModule
    } else {
        MatchLevel::All
    }
}

fn type_matches(pred: &CriticalDiagnosis, gold: &GoldAnnotation) -> bool {
    pred.error_label.error_type == gold.error_label.error_type
}

pub type Frac = Ratio<u64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionMetrics {
    pub step_acc: Frac,
    pub step_module_acc: Frac,
    pub all_acc: Frac,
    pub error_only_acc: Frac,
    pub n: u64,
}

impl Serialize for DetectionMetrics {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let f = |r: Frac| *r.numer() as f64 / *r.denom() as f64;
        let mut st = s.serialize_struct("DetectionMetrics", 5)?;
        st.serialize_field("step_acc", &f(self.step_acc))?;
        st.serialize_field("step_module_acc", &f(self.step_module_acc))?;
        st.serialize_field("all_acc", &f(self.all_acc))?;
        st.serialize_field("error_only_acc", &f(self.error_only_acc))?;
        st.serialize_field("n", &self.n)?;
        st.end()
    }
}

/// Tenths of a percent, e.g. 35.0% is 350.
fn from_tenths(t: u64) -> Frac {
    Ratio::new(t, 1000)
}

impl DetectionMetrics {
    /// Builds metrics from reported percentages with one decimal, as
    /// printed in published tables. `n` is set to 1.
    pub fn from_percentages(step: f64, step_module: f64, all: f64, error_only: f64) -> Self {
        let t = |p: f64| from_tenths((p * 10.0).round().max(0.0) as u64);
        Self {
            step_acc: t(step),
            step_module_acc: t(step_module),
            all_acc: t(all),
            error_only_acc: t(error_only),
            n: 1,
        }
    }

    pub fn is_nested(&self) -> bool {
        self.all_acc <= self.step_module_acc && self.step_module_acc <= self.step_acc
    }
}

/// Percent with one decimal, rounding half up.
pub fn format_percent(r: Frac) -> String {
    let scaled = r * Ratio::from_integer(1000u64);
    let tenths = (scaled + Ratio::new(1, 2)).floor().to_integer();
    format!("{}.{}", tenths / 10, tenths % 10)
}

pub fn compute_detection_metrics(
    pairs: &[(&CriticalDiagnosis, &GoldAnnotation)],
) -> Result<DetectionMetrics, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let n = pairs.len() as u64;
    let mut counts = [0u64; 4];
    let mut type_only = 0;
    for (p, g) in pairs {
        let level = match_prediction(p, g);
        for (i, c) in counts.iter_mut().enumerate().skip(1) {
            if level as usize >= i {
                *c += 1;
            }
        }
        type_only += type_matches(p, g) as u64;
    }
    Ok(DetectionMetrics {
        step_acc: Ratio::new(counts[1], n),
        step_module_acc: Ratio::new(counts[2], n),
        all_acc: Ratio::new(counts[3], n),
        error_only_acc: Ratio::new(type_only, n),
        n,
    })
}

/// Unweighted mean over datasets; `n` is the pooled count.
pub fn macro_average(per_dataset: &[DetectionMetrics]) -> Result<DetectionMetrics, EvalError> {
    if per_dataset.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let k = Ratio::from_integer(per_dataset.len() as u64);
    let mean = |f: fn(&DetectionMetrics) -> Frac| per_dataset.iter().map(f).sum::<Frac>() / k;
    Ok(DetectionMetrics {
        step_acc: mean(|m| m.step_acc),
        step_module_acc: mean(|m| m.step_module_acc),
        all_acc: mean(|m| m.all_acc),
        error_only_acc: mean(|m| m.error_only_acc),
        n: per_dataset.iter().map(|m| m.n).sum(),
    })
}

/// Mean weighted by each dataset's `n`.
pub fn micro_average(per_dataset: &[DetectionMetrics]) -> Result<DetectionMetrics, EvalError> {
    let n: u64 = per_dataset.iter().map(|m| m.n).sum();
    if n == 0 {
        return Err(EvalError::EmptySet);
    }
    let pooled = |f: fn(&DetectionMetrics) -> Frac| {
        per_dataset.iter().map(|m| f(m) * Ratio::from_integer(m.n)).sum::<Frac>() / Ratio::from_integer(n)
    };
    Ok(DetectionMetrics {
        step_acc: pooled(|m| m.step_acc),
        step_module_acc: pooled(|m| m.step_module_acc),
        all_acc: pooled(|m| m.all_acc),
        error_only_acc: pooled(|m| m.error_only_acc),
        n,
    })
}

/// Point k is the share of tasks solved within k attempts, k = 0 being
/// the initial rollout.
pub fn success_rate_curve(results: &[DebugResult], max_attempts: usize) -> Result<Vec<f64>, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let n = results.len() as f64;
    let solved: Vec<Option<usize>> = results.iter().map(DebugResult::attempts_to_success).collect();
    let curve: Vec<f64> = (0..=max_attempts)
        .map(|k| solved.iter().filter(|s| s.is_some_and(|a| a <= k)).count() as f64 / n)
        .collect();
    debug_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
    Ok(curve)
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub metrics: DetectionMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub datasets: Vec<DatasetReport>,
    pub average: DetectionMetrics,
    pub averaging: &'static str,
}

impl MetricsReport {
    /// Joins predictions with gold by trajectory id, grouped by dataset in
    /// name order. Every gold item needs exactly one prediction.
    pub fn build(
        gold: &[super::BenchmarkItem],
        predictions: &[Prediction],
        micro: bool,
    ) -> Result<Self, EvalError> {
        if gold.is_empty() {
            return Err(EvalError::EmptySet);
        }
        let mut by_id: BTreeMap<&str, &CriticalDiagnosis> = BTreeMap::new();
        for p in predictions {
            if by_id.insert(p.trajectory_id.as_str(), &p.diagnosis).is_some() {
                return Err(EvalError::InconsistentIds(format!("two predictions for {}", p.trajectory_id)));
            }
        }
        let mut groups: BTreeMap<&str, Vec<(&CriticalDiagnosis, &GoldAnnotation)>> = BTreeMap::new();
        for item in gold {
            let id = item.annotation.trajectory_id.as_str();
            let pred = by_id.remove(id).ok_or_else(|| EvalError::IdMismatch {
                predicted: "(none)".into(),
                gold: id.into(),
            })?;
            groups.entry(item.dataset.as_str()).or_default().push((pred, &item.annotation));
        }
        if let Some(extra) = by_id.keys().next() {
            return Err(EvalError::IdMismatch {
                predicted: extra.to_string(),
                gold: "(none)".into(),
            });
        }
        let datasets = groups
            .into_iter()
            .map(|(name, pairs)| {
                compute_detection_metrics(&pairs).map(|metrics| DatasetReport {
                    dataset: name.to_string(),
                    metrics,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let all: Vec<DetectionMetrics> = datasets.iter().map(|d| d.metrics).collect();
        let average = if micro { micro_average(&all)? } else { macro_average(&all)? };
        Ok(Self {
            datasets,
            average,
            averaging: if micro { "micro" } else { "macro" },
        })
    }
}

/// Aligned plain-text table: one row per dataset then the average.
pub fn render_table(report: &MetricsReport) -> String {
    let label = format!("Average ({})", report.averaging);
    let mut rows: Vec<(String, &DetectionMetrics)> = report
        .datasets
        .iter()
        .map(|d| (d.dataset.clone(), &d.metrics))
        .collect();
    rows.push((label, &report.average));
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("Dataset".len());
    let mut out = format!(
        "{:<width$}  {:>4}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "Dataset", "n", "S", "S+M", "ALL", "Err"
    );
    for (name, m) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>4}  {:>6}  {:>6}  {:>6}  {:>6}\n",
            name,
            m.n,
            format_percent(m.step_acc),
            format_percent(m.step_module_acc),
            format_percent(m.all_acc),
            format_percent(m.error_only_acc),
        ));
    }
    out
}
