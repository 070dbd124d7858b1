//! Trajectory data model.
//!
//! A [`Trajectory`] is the ordered record of one agent episode. Everything
//! else in the crate consumes these types: the rollout engine produces them,
//! the debug pipeline annotates them, and the evaluation kit scores them.
//!
//! Step indices are 1-based everywhere. Values are plain data; operations
//! that "modify" a trajectory consume it and hand back a new value.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::parse::interpret_completion;
use crate::taxonomy::ErrorLabel;

/// Version written to and required from trajectory JSON documents.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("index gap: expected step {expected}, got {found}")]
    IndexGap { expected: u32, found: u32 },
    #[error("module rule violation at step {step}: {module} output not allowed")]
    ModuleRuleViolation { step: u32, module: ModuleKind },
    #[error("step {t} out of range 1..={max}")]
    OutOfRange { t: u32, max: u32 },
    #[error("schema violation at `{path}`: {message}")]
    SchemaViolation { path: String, message: String },
}

/// The agent modules a step can be attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Memory,
    Reflection,
    Planning,
    Action,
    System,
    Others,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 6] = [
        ModuleKind::Memory,
        ModuleKind::Reflection,
        ModuleKind::Planning,
        ModuleKind::Action,
        ModuleKind::System,
        ModuleKind::Others,
    ];

    /// The four reasoning modules, in pipeline order.
    pub const REASONING: [ModuleKind; 4] = [
        ModuleKind::Memory,
        ModuleKind::Reflection,
        ModuleKind::Planning,
        ModuleKind::Action,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Memory => "memory",
            ModuleKind::Reflection => "reflection",
            ModuleKind::Planning => "planning",
            ModuleKind::Action => "action",
            ModuleKind::System => "system",
            ModuleKind::Others => "others",
        }
    }

    pub fn is_reasoning(self) -> bool {
        Self::REASONING.contains(&self)
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown module `{s}`"))
    }
}

/// Rollout strategy; decides which modules the agent emits per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    Modular,
    React,
    Reflection,
    ActOnly,
    MemoryReact,
}

impl StrategyId {
    pub const ALL: [StrategyId; 5] = [
        StrategyId::Modular,
        StrategyId::React,
        StrategyId::Reflection,
        StrategyId::ActOnly,
        StrategyId::MemoryReact,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::Modular => "modular",
            StrategyId::React => "react",
            StrategyId::Reflection => "reflection",
            StrategyId::ActOnly => "act_only",
            StrategyId::MemoryReact => "memory_react",
        }
    }

    /// Full module set of the strategy, in pipeline order.
    pub fn modules(self) -> &'static [ModuleKind] {
        use ModuleKind::*;
        match self {
            StrategyId::Modular => &[Memory, Reflection, Planning, Action],
            StrategyId::React => &[Planning, Action],
            StrategyId::Reflection => &[Reflection, Planning, Action],
            StrategyId::ActOnly => &[Action],
            StrategyId::MemoryReact => &[Memory, Planning, Action],
        }
    }

    /// Modules emitted at a given 1-based step. Step 1 has no history, so
    /// memory and reflection are absent whatever the strategy.
    pub fn modules_at(self, step: u32) -> &'static [ModuleKind] {
        use ModuleKind::*;
        match (self, step) {
            (StrategyId::ActOnly, _) => &[Action],
            (_, 1) => &[Planning, Action],
            _ => self.modules(),
        }
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '+', ' '], "_");
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == key)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenUsage {
    #[serde(rename = "prompt")]
    pub prompt_tokens: u64,
    #[serde(rename = "completion")]
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub const ZERO: TokenUsage = TokenUsage {
        prompt_tokens: 0,
        completion_tokens: 0,
    };

    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> Self {
        iter.fold(TokenUsage::ZERO, Add::add)
    }
}

/// Trim and collapse internal whitespace runs to a single space.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// An action in canonical form, as executed against an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CanonicalAction {
    EnvAction {
        text: String,
    },
    ToolCall {
        name: String,
        #[serde(default)]
        parameters: BTreeMap<String, serde_json::Value>,
    },
    FinalAnswer {
        text: String,
    },
    Invalid {
        raw: String,
    },
}

impl CanonicalAction {
    /// Environment action with normalized whitespace; empty text becomes
    /// [`CanonicalAction::Invalid`].
    pub fn env(text: &str) -> Self {
        let norm = normalize_whitespace(text);
        if norm.is_empty() {
            CanonicalAction::Invalid {
                raw: text.to_string(),
            }
        } else {
            CanonicalAction::EnvAction { text: norm }
        }
    }

    pub fn tool(name: &str, parameters: BTreeMap<String, serde_json::Value>) -> Self {
        let name = name.trim();
        if is_identifier(name) {
            CanonicalAction::ToolCall {
                name: name.to_string(),
                parameters,
            }
        } else {
            CanonicalAction::Invalid {
                raw: name.to_string(),
            }
        }
    }

    pub fn answer(text: &str) -> Self {
        CanonicalAction::FinalAnswer {
            text: text.trim().to_string(),
        }
    }

    pub fn invalid(raw: &str) -> Self {
        CanonicalAction::Invalid {
            raw: raw.to_string(),
        }
    }

    pub fn is_invalid(&self) -> bool {
        matches!(self, CanonicalAction::Invalid { .. })
    }

    /// Checks the form invariants: non-empty normalized env text and an
    /// identifier tool name.
    pub fn is_well_formed(&self) -> bool {
        match self {
            CanonicalAction::EnvAction { text } => {
                !text.is_empty() && normalize_whitespace(text) == *text
            }
            CanonicalAction::ToolCall { name, .. } => is_identifier(name),
            CanonicalAction::FinalAnswer { .. } | CanonicalAction::Invalid { .. } => true,
        }
    }
}

impl fmt::Display for CanonicalAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CanonicalAction::EnvAction { text } => f.write_str(text),
            CanonicalAction::ToolCall { name, parameters } => {
                let params = serde_json::to_string(parameters).map_err(|_| fmt::Error)?;
                write!(f, "{name} {params}")
            }
            CanonicalAction::FinalAnswer { text } => write!(f, "answer: {text}"),
            CanonicalAction::Invalid { raw } => {
                write!(f, "<invalid: {}>", normalize_whitespace(raw))
            }
        }
    }
}

/// Why a run was stopped by the surrounding system rather than the task.
/// The variants mirror the system error types of the taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    StepLimit,
    ToolExecutionError,
    LlmLimit,
    EnvironmentError,
}

impl HaltReason {
    pub fn as_str(self) -> &'static str {
        match self {
            HaltReason::StepLimit => "step_limit",
            HaltReason::ToolExecutionError => "tool_execution_error",
            HaltReason::LlmLimit => "llm_limit",
            HaltReason::EnvironmentError => "environment_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    SystemHalt { reason: HaltReason },
}

impl Outcome {
    pub fn is_success(&self) -> bool {
        matches!(self, Outcome::Success)
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Success => f.write_str("success"),
            Outcome::Failure => f.write_str("failure"),
            Outcome::SystemHalt { reason } => write!(f, "system_halt({})", reason.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub index: u32,
    pub observation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admissible_actions: Option<Vec<String>>,
    #[serde(default)]
    pub module_outputs: BTreeMap<ModuleKind, String>,
    pub action: CanonicalAction,
    pub env_response: String,
    #[serde(default)]
    pub raw_completion: String,
    #[serde(default)]
    pub token_usage: TokenUsage,
}

/// Injectable guidance for a re-rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Feedback {
    pub target_step: u32,
    pub error_label: ErrorLabel,
    pub guidance: String,
    pub attempt_index: u32,
    #[serde(default)]
    pub prior_guidance: Vec<String>,
}

impl Feedback {
    pub fn is_consistent(&self) -> bool {
        self.target_step >= 1
            && self.attempt_index >= 1
            && self.prior_guidance.len() == (self.attempt_index - 1) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub schema_version: u32,
    pub task_id: String,
    pub env_name: String,
    pub task_description: String,
    pub strategy: StrategyId,
    pub model_id: String,
    pub seed: u64,
    /// Step cap the episode ran under, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_cap: Option<u32>,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_applied: Option<Feedback>,
}

/// Task metadata shared by trajectories, prefixes, and builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task_id: String,
    pub env_name: String,
    pub task_description: String,
    pub strategy: StrategyId,
    pub model_id: String,
    pub seed: u64,
    pub step_cap: Option<u32>,
}

/// Immutable steps `1..t` of a trajectory plus its task metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPrefix {
    pub meta: TaskMeta,
    pub steps: Vec<StepRecord>,
}

impl TrajectoryPrefix {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> Vec<CanonicalAction> {
        self.steps.iter().map(|s| s.action.clone()).collect()
    }
}

/// Trajectory under construction: steps can still be appended and the
/// outcome is not yet final.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBuilder {
    meta: TaskMeta,
    steps: Vec<StepRecord>,
    feedback: Option<Feedback>,
}

impl TrajectoryBuilder {
    pub fn new(meta: TaskMeta) -> Self {
        Self {
            meta,
            steps: Vec::new(),
            feedback: None,
        }
    }

    pub fn from_prefix(prefix: &TrajectoryPrefix) -> Self {
        Self {
            meta: prefix.meta.clone(),
            steps: prefix.steps.clone(),
            feedback: None,
        }
    }

    pub fn with_feedback(mut self, feedback: Option<Feedback>) -> Self {
        self.feedback = feedback;
        self
    }

    pub fn meta(&self) -> &TaskMeta {
        &self.meta
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Appends the next step; its index must be `len + 1`.
    pub fn append_step(mut self, step: StepRecord) -> Result<Self, ModelError> {
        let expected = self.steps.len() as u32 + 1;
        if step.index != expected {
            return Err(ModelError::IndexGap {
                expected,
                found: step.index,
            });
        }
        if let Some(module) = disallowed_module(self.meta.strategy, &step) {
            return Err(ModelError::ModuleRuleViolation {
                step: step.index,
                module,
            });
        }
        self.steps.push(step);
        Ok(self)
    }

    pub fn finish(self, outcome: Outcome) -> Trajectory {
        Trajectory {
            schema_version: SCHEMA_VERSION,
            task_id: self.meta.task_id,
            env_name: self.meta.env_name,
            task_description: self.meta.task_description,
            strategy: self.meta.strategy,
            model_id: self.meta.model_id,
            seed: self.meta.seed,
            step_cap: self.meta.step_cap,
            steps: self.steps,
            outcome,
            feedback_applied: self.feedback,
        }
    }
}

fn disallowed_module(strategy: StrategyId, step: &StepRecord) -> Option<ModuleKind> {
    let allowed = strategy.modules_at(step.index.max(1));
    step.module_outputs
        .keys()
        .copied()
        .find(|m| !allowed.contains(m))
}

/// Identifier of a violated trajectory invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleId {
    SchemaVersion,
    IndexGap,
    ModuleRuleViolation,
    MalformedAction,
    ActionReparseMismatch,
    StepLimitMismatch,
    FeedbackInconsistent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: RuleId,
    /// Offending step, when the rule is step-local.
    pub step: Option<u32>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(step) => write!(f, "{:?}@{}: {}", self.rule, step, self.detail),
            None => write!(f, "{:?}: {}", self.rule, self.detail),
        }
    }
}

impl Trajectory {
    pub fn meta(&self) -> TaskMeta {
        TaskMeta {
            task_id: self.task_id.clone(),
            env_name: self.env_name.clone(),
            task_description: self.task_description.clone(),
            strategy: self.strategy,
            model_id: self.model_id.clone(),
            seed: self.seed,
            step_cap: self.step_cap,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, index: u32) -> Option<&StepRecord> {
        index
            .checked_sub(1)
            .and_then(|i| self.steps.get(i as usize))
    }

    pub fn usage(&self) -> TokenUsage {
        self.steps.iter().map(|s| s.token_usage).sum()
    }

    /// Steps with index `< t`; valid for `1 <= t <= T + 1`.
    pub fn truncate_before(&self, t: u32) -> Result<TrajectoryPrefix, ModelError> {
        let max = self.steps.len() as u32 + 1;
        if t == 0 || t > max {
            return Err(ModelError::OutOfRange { t, max });
        }
        Ok(TrajectoryPrefix {
            meta: self.meta(),
            steps: self.steps[..(t - 1) as usize].to_vec(),
        })
    }

    /// Checks every structural invariant; an empty list means the
    /// trajectory is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(Violation {
                rule: RuleId::SchemaVersion,
                step: None,
                detail: format!("unsupported schema_version {}", self.schema_version),
            });
        }
        for (pos, step) in self.steps.iter().enumerate() {
            let expected = pos as u32 + 1;
            if step.index != expected {
                out.push(Violation {
                    rule: RuleId::IndexGap,
                    step: Some(step.index),
                    detail: format!("expected index {expected}"),
                });
            }
            if let Some(module) = disallowed_module(self.strategy, step) {
                out.push(Violation {
                    rule: RuleId::ModuleRuleViolation,
                    step: Some(step.index),
                    detail: format!("{module} output not allowed under {}", self.strategy),
                });
            }
            if !step.action.is_well_formed() {
                out.push(Violation {
                    rule: RuleId::MalformedAction,
                    step: Some(step.index),
                    detail: format!("{:?}", step.action),
                });
            }
            // Records without raw model text carry no re-parse obligation.
            if !step.raw_completion.is_empty() {
                let (_, reparsed) = interpret_completion(
                    &step.raw_completion,
                    self.strategy,
                    step.index.max(1),
                    step.admissible_actions.as_deref(),
                );
                if reparsed != step.action {
                    out.push(Violation {
                        rule: RuleId::ActionReparseMismatch,
                        step: Some(step.index),
                        detail: format!("stored {} but raw completion parses to {}", step.action, reparsed),
                    });
                }
            }
        }
        if let (Outcome::SystemHalt { reason: HaltReason::StepLimit }, Some(cap)) =
            (self.outcome, self.step_cap)
        {
            if self.steps.len() as u32 != cap {
                out.push(Violation {
                    rule: RuleId::StepLimitMismatch,
                    step: None,
                    detail: format!("step_limit halt with T={} but cap {cap}", self.steps.len()),
                });
            }
        }
        if let Some(fb) = &self.feedback_applied {
            if !fb.is_consistent() {
                out.push(Violation {
                    rule: RuleId::FeedbackInconsistent,
                    step: Some(fb.target_step),
                    detail: format!(
                        "attempt_index {} with {} prior guidance entries",
                        fb.attempt_index,
                        fb.prior_guidance.len()
                    ),
                });
            }
        }
        out
    }

    /// Pretty-printed JSON with LF line endings.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        from_json_versioned(text)
    }
}

/// Deserializes a versioned document, reporting the failing field path.
pub(crate) fn from_json_versioned<T: serde::de::DeserializeOwned>(
    text: &str,
) -> Result<T, ModelError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ModelError::SchemaViolation {
            path: String::new(),
            message: e.to_string(),
        })?;
    check_schema_version(&value, "")?;
    from_value_with_path(value)
}

pub(crate) fn check_schema_version(value: &serde_json::Value, base: &str) -> Result<(), ModelError> {
    let path = join_path(base, "schema_version");
    match value.get("schema_version") {
        None => Err(ModelError::SchemaViolation {
            path,
            message: "missing field `schema_version`".into(),
        }),
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION as u64) => Ok(()),
        Some(v) => Err(ModelError::SchemaViolation {
            path,
            message: format!("unsupported schema_version {v}"),
        }),
    }
}

pub(crate) fn from_value_with_path<T: serde::de::DeserializeOwned>(
    value: serde_json::Value,
) -> Result<T, ModelError> {
    serde_path_to_error::deserialize(value).map_err(|err| {
        let mut path = err.path().to_string();
        if path == "." {
            path.clear();
        }
        let message = err.inner().to_string();
        // serde reports a missing field at its parent; name the field itself.
        if let Some(field) = message
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next())
        {
            path = join_path(&path, field);
        }
        ModelError::SchemaViolation { path, message }
    })
}

fn join_path(base: &str, field: &str) -> String {
    if base.is_empty() {
        field.to_string()
    } else {
        format!("{base}.{field}")
    }
}
