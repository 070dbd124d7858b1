//! Debugging toolkit for LLM-agent trajectories.
//!
//! Per-module error detection, earliest critical-step localization, and
//! feedback-guided re-rollout, plus the baselines and metrics used to
//! compare them. Everything runs offline against the scripted model
//! backend and the built-in grid world; the live backend talks to any
//! OpenAI-compatible endpoint.

pub mod cli;
pub mod debug;
pub mod env;
pub mod eval;
pub mod fixtures;
pub mod llm;
pub mod model;
pub mod prompts;
pub mod rollout;
pub mod taxonomy;

pub use model::{
    CanonicalAction, Feedback, HaltReason, ModuleKind, Outcome, StepRecord, StrategyId,
    TaskMeta, TokenUsage, Trajectory, TrajectoryBuilder, TrajectoryPrefix,
};
pub use taxonomy::ErrorLabel;
