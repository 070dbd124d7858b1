//! Detection, critical-step diagnosis, feedback-guided re-rollout, and
//! the comparison baselines.

pub mod analyze;
pub mod baselines;
pub mod detect;
pub mod localize;
pub mod rerollout;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvError;
use crate::llm::{ChatRequest, LlmError};
use crate::model::{Feedback, Outcome, TokenUsage, Trajectory};
use crate::rollout::{RolloutConfig, RolloutError, TemplateSet};
use crate::taxonomy::TaxonomyError;

pub use analyze::{
    analyze_critical, direct_prompt_localize, feedback_from_diagnosis, update_feedback,
    CascadeEffect, CriticalDiagnosis,
};
pub use baselines::{best_of_n, self_refine_loop, tot_search};
pub use detect::{detect_all, detect_step_errors, ErrorDetection, ErrorProfile};
pub use localize::{
    binary_search_localize, brute_force_localize, counterfactual_fix_succeeds,
    first_success_bisect, first_success_linear, Corrector, Localization,
};
pub use rerollout::debug_loop;

/// Default Stage-3 attempt budget I.
pub const DEFAULT_BUDGET: u32 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DebugError {
    #[error("judge output could not be parsed: {0}")]
    JudgeParseFailure(String),
    #[error(transparent)]
    UnknownErrorType(#[from] TaxonomyError),
    #[error("invalid diagnosis: {0}")]
    InvalidDiagnosis(String),
    #[error("line-format reply could not be parsed: {0}")]
    LineFormatParseFailure(String),
    #[error("no critical error found")]
    NotFound,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("score reply could not be parsed: {0}")]
    ScoreParseFailure(String),
    #[error(transparent)]
    Llm(LlmError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl From<LlmError> for DebugError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Json(j) => DebugError::JudgeParseFailure(j.to_string()),
            other => DebugError::Llm(other),
        }
    }
}

/// Settings shared by every debugging method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugConfig {
    /// Agent settings for re-rollouts and probes. Strategy and step cap
    /// are taken from the trajectory being debugged.
    pub rollout: RolloutConfig,
    pub judge_model: String,
    pub judge_temperature: f64,
    /// Extra attempts when a judge reply holds no parseable JSON.
    pub json_retries: u32,
    /// Stage-3 attempt budget I.
    pub budget: u32,
}

impl Default for DebugConfig {
    fn default() -> Self {
        Self {
            rollout: RolloutConfig::new(crate::model::StrategyId::Modular),
            judge_model: "scripted".into(),
            judge_temperature: 0.0,
            json_retries: 1,
            budget: DEFAULT_BUDGET,
        }
    }
}

impl DebugConfig {
    /// Rollout settings matching a recorded trajectory.
    pub fn rollout_for(&self, trajectory: &Trajectory) -> RolloutConfig {
        let mut cfg = self.rollout.clone();
        cfg.strategy = trajectory.strategy;
        cfg.step_cap = trajectory.step_cap;
        if let Ok(set) = trajectory.env_name.parse::<TemplateSet>() {
            cfg.template_set = set;
        }
        cfg
    }

    pub(crate) fn judge_request(&self, prompt: String) -> ChatRequest {
        ChatRequest::user(&self.judge_model, prompt).with_temperature(self.judge_temperature)
    }
}

/// One re-rollout (or sample) and the feedback it ran under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<Feedback>,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugResult {
    pub method: String,
    pub initial: Trajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ErrorProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<CriticalDiagnosis>,
    pub attempts: Vec<Attempt>,
    pub final_outcome: Outcome,
    pub total_usage: TokenUsage,
    /// Set when an armed token budget stopped the method early.
    #[serde(default)]
    pub budget_exhausted: bool,
}

impl DebugResult {
    pub fn succeeded(&self) -> bool {
        self.final_outcome.is_success()
    }

    /// Attempts used before the first success: 0 when the initial
    /// trajectory succeeded, `None` when nothing succeeded.
    pub fn attempts_to_success(&self) -> Option<usize> {
        if self.initial.outcome.is_success() {
            return Some(0);
        }
        self.attempts
            .iter()
            .position(|a| a.trajectory.outcome.is_success())
            .map(|i| i + 1)
    }

    pub(crate) fn finish(mut self) -> Self {
        self.final_outcome = self
            .attempts
            .last()
            .map(|a| a.trajectory.outcome)
            .unwrap_or(self.initial.outcome);
        self
    }
}
