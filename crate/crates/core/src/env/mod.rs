//! Environment interface, prefix replay, and the built-in environments.

pub mod gridworld;
pub mod replay;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CanonicalAction, HaltReason, Outcome, StepRecord};
pub use gridworld::{GridWorld, WorldSpec};
pub use replay::ReplayEnv;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvError {
    #[error("step called after the episode finished")]
    SteppedAfterDone,
    #[error("environment crashed: {0}")]
    Crash(String),
    #[error("tool execution failed: {0}")]
    ToolFailure(String),
    #[error("replay diverged at step {step}: expected `{expected}`, got `{found}`")]
    ReplayDivergence {
        step: u32,
        expected: String,
        found: String,
    },
    #[error("environment is not deterministic; prefix replay refused")]
    NonDeterministicEnv,
    #[error("episode not finished")]
    NotFinished,
    #[error("{0} is not supported by this environment")]
    Unsupported(&'static str),
    #[error("cannot load environment: {0}")]
    Load(String),
}

impl EnvError {
    /// The system halt this error ends an episode with, if any.
    pub fn halt_reason(&self) -> Option<HaltReason> {
        match self {
            EnvError::Crash(_) => Some(HaltReason::EnvironmentError),
            EnvError::ToolFailure(_) => Some(HaltReason::ToolExecutionError),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvDescriptor {
    pub env_name: String,
    pub task_id: String,
    pub task_description: String,
    pub step_cap: u32,
    pub deterministic: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionResult {
    pub observation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admissible_actions: Option<Vec<String>>,
    pub done: bool,
    /// Present exactly when `done`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
    #[serde(default)]
    pub invalid_action: bool,
}

impl ActionResult {
    pub fn running(observation: String, admissible_actions: Option<Vec<String>>) -> Self {
        Self {
            observation,
            admissible_actions,
            done: false,
            success: None,
            invalid_action: false,
        }
    }
}

pub trait Environment: Send {
    fn descriptor(&self) -> &EnvDescriptor;

    /// Back to the seed-determined initial state.
    fn reset(&mut self) -> ActionResult;

    fn step(&mut self, action: &CanonicalAction) -> Result<ActionResult, EnvError>;

    fn steps_taken(&self) -> u32;

    fn last_result(&self) -> Option<&ActionResult>;

    /// Maps the finished episode to an [`Outcome`]. Exhausting the step
    /// cap without success is a `step_limit` halt.
    fn outcome(&self) -> Result<Outcome, EnvError> {
        let last = self.last_result().ok_or(EnvError::NotFinished)?;
        if !last.done {
            return Err(EnvError::NotFinished);
        }
        Ok(match last.success {
            Some(true) => Outcome::Success,
            _ if self.steps_taken() >= self.descriptor().step_cap => Outcome::SystemHalt {
                reason: HaltReason::StepLimit,
            },
            _ => Outcome::Failure,
        })
    }

    /// Snapshot hook for live simulators. Built-ins rely on prefix replay.
    fn checkpoint(&self) -> Result<Vec<u8>, EnvError> {
        Err(EnvError::Unsupported("checkpoint"))
    }
}

/// Produces fresh environment instances, one per rollout or probe.
pub trait EnvFactory: Send + Sync {
    fn make(&self) -> Result<Box<dyn Environment>, EnvError>;
}

impl<F> EnvFactory for F
where
    F: Fn() -> Result<Box<dyn Environment>, EnvError> + Send + Sync,
{
    fn make(&self) -> Result<Box<dyn Environment>, EnvError> {
        self()
    }
}

/// Resets `env` and re-applies `actions`. When `records` are given, each
/// step's observation and response are checked against them. Returns the
/// result the agent would see next (the reset result for an empty prefix).
pub fn replay_prefix(
    env: &mut dyn Environment,
    actions: &[CanonicalAction],
    records: Option<&[StepRecord]>,
) -> Result<ActionResult, EnvError> {
    if !env.descriptor().deterministic {
        return Err(EnvError::NonDeterministicEnv);
    }
    let mut current = env.reset();
    for (i, action) in actions.iter().enumerate() {
        let record = records.and_then(|r| r.get(i));
        if let Some(rec) = record {
            check(i as u32 + 1, &rec.observation, &current.observation)?;
        }
        current = env.step(action)?;
        if let Some(rec) = record {
            check(i as u32 + 1, &rec.env_response, &current.observation)?;
        }
    }
    Ok(current)
}

fn check(step: u32, expected: &str, found: &str) -> Result<(), EnvError> {
    if expected == found {
        Ok(())
    } else {
        Err(EnvError::ReplayDivergence {
            step,
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

/// Environment names accepted by [`load_env`].
pub const ENV_NAMES: &[&str] = &["gridworld", "replay"];

/// Builds an environment from its registry name and a spec file: a world
/// spec for `gridworld`, a trajectory for `replay`.
pub fn load_env(env_name: &str, path: &Path) -> Result<Box<dyn Environment>, EnvError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EnvError::Load(format!("{}: {e}", path.display())))?;
    match env_name {
        "gridworld" => {
            let spec = WorldSpec::from_json(&text)?;
            Ok(Box::new(GridWorld::new(spec)?))
        }
        "replay" => {
            let traj = crate::model::Trajectory::from_json(&text)
                .map_err(|e| EnvError::Load(e.to_string()))?;
            Ok(Box::new(ReplayEnv::new(traj)))
        }
        other => Err(EnvError::Load(format!(
            "unknown environment `{other}` (known: {})",
            ENV_NAMES.join(", ")
        ))),
    }
}
