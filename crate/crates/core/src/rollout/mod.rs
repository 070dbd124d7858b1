//! One agent episode: prompt, complete, parse, act, record.

pub mod parse;
pub mod prompt;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{replay_prefix, EnvError, Environment};
use crate::llm::template::TemplateError;
use crate::llm::{ChatModel, ChatRequest};
use crate::model::{
    Feedback, ModelError, Outcome, StepRecord, StrategyId, TaskMeta, Trajectory,
    TrajectoryBuilder, TrajectoryPrefix,
};

pub use parse::{interpret_completion, normalize_action, parse_agent_completion};
pub use prompt::{build_step_prompt, format_action_history};

/// Which bundled rollout template family renders step prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSet {
    Alfworld,
    Webshop,
    Gaia,
    /// The alfworld text with grid-world bindings.
    Gridworld,
}

impl TemplateSet {
    pub const ALL: [TemplateSet; 4] = [
        TemplateSet::Alfworld,
        TemplateSet::Webshop,
        TemplateSet::Gaia,
        TemplateSet::Gridworld,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateSet::Alfworld => "alfworld",
            TemplateSet::Webshop => "webshop",
            TemplateSet::Gaia => "gaia",
            TemplateSet::Gridworld => "gridworld",
        }
    }

    /// Template file the sections come from.
    pub fn file(self) -> &'static str {
        match self {
            TemplateSet::Gridworld => "alfworld",
            other => other.as_str(),
        }
    }

    /// Human-readable environment name used in judge prompts.
    pub fn environment_label(self) -> &'static str {
        match self {
            TemplateSet::Alfworld => "ALFWorld",
            TemplateSet::Webshop => "WebShop",
            TemplateSet::Gaia => "GAIA",
            TemplateSet::Gridworld => "GridWorld (ALFWorld-style text household)",
        }
    }

    /// Default template family for an environment name.
    pub fn for_env(env_name: &str) -> Self {
        env_name.parse().unwrap_or(TemplateSet::Alfworld)
    }
}

impl fmt::Display for TemplateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateSet::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown template set `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub strategy: StrategyId,
    /// K, the number of recent steps shown in history prompts.
    pub history_window: usize,
    /// When `None` the environment's cap is used.
    pub step_cap: Option<u32>,
    pub model_id: String,
    pub temperature: f64,
    pub template_set: TemplateSet,
    pub observation_char_limit: usize,
    /// GAIA only: the final step shows the whole history.
    pub full_history_last_step: bool,
    pub seed: Option<u64>,
}

impl RolloutConfig {
    pub fn new(strategy: StrategyId) -> Self {
        Self {
            strategy,
            history_window: 10,
            step_cap: None,
            model_id: "scripted".into(),
            temperature: 0.0,
            template_set: TemplateSet::Gridworld,
            observation_char_limit: 400,
            full_history_last_step: false,
            seed: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("feedback targets step {target} but the prefix has {prefix_len} step(s)")]
    FeedbackTarget { target: u32, prefix_len: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `{task_id}.{attempt}.json`.
pub fn trajectory_file_name(task_id: &str, attempt: u32) -> String {
    format!("{task_id}.{attempt}.json")
}

/// Runs an episode to completion.
///
/// With a prefix, its actions are replayed (checked against the recorded
/// observations) and the recorded steps are copied verbatim; generation
/// resumes at `prefix.len() + 1`, which must equal the feedback's target
/// step when both are given. The feedback block appears in every prompt
/// from the target step on.
///
/// A model failure ends the episode as `system_halt(llm_limit)` without
/// recording the step. A crash or tool failure reported by the
/// environment records the step with the error as its response and halts.
pub fn run_rollout(
    config: &RolloutConfig,
    env: &mut dyn Environment,
    client: &dyn ChatModel,
    prefix: Option<&TrajectoryPrefix>,
    feedback: Option<&Feedback>,
) -> Result<Trajectory, RolloutError> {
    if config.history_window == 0 {
        return Err(RolloutError::Config("history_window must be at least 1".into()));
    }
    let desc = env.descriptor().clone();
    let cap = match config.step_cap {
        Some(c) if c != desc.step_cap => {
            return Err(RolloutError::Config(format!(
                "step_cap {c} does not match the environment's {}",
                desc.step_cap
            )))
        }
        _ => desc.step_cap,
    };
    if let (Some(p), Some(fb)) = (prefix, feedback) {
        if fb.target_step as usize != p.len() + 1 {
            return Err(RolloutError::FeedbackTarget {
                target: fb.target_step,
                prefix_len: p.len(),
            });
        }
    }
    let mut cfg = config.clone();
    cfg.step_cap = Some(cap);

    let (mut builder, mut current) = match prefix {
        Some(p) => {
            let current = replay_prefix(env, &p.actions(), Some(&p.steps))?;
            (TrajectoryBuilder::from_prefix(p), current)
        }
        None => {
            let meta = TaskMeta {
                task_id: desc.task_id.clone(),
                env_name: desc.env_name.clone(),
                task_description: desc.task_description.clone(),
                strategy: cfg.strategy,
                model_id: cfg.model_id.clone(),
                seed: cfg.seed.unwrap_or(desc.seed),
                step_cap: Some(cap),
            };
            (TrajectoryBuilder::new(meta), env.reset())
        }
    };
    builder = builder.with_feedback(feedback.cloned());
    let task = builder.meta().task_description.clone();

    while !current.done && (builder.len() as u32) < cap {
        let step = builder.len() as u32 + 1;
        let admissible = current.admissible_actions.clone();
        let active = feedback.filter(|fb| step >= fb.target_step);
        let text = build_step_prompt(
            &cfg,
            &task,
            builder.steps(),
            &current.observation,
            admissible.as_deref(),
            active,
        )?;
        let request = ChatRequest::user(&cfg.model_id, text)
            .with_temperature(cfg.temperature)
            .with_seed(cfg.seed);
        let completion = match client.complete(&request) {
            Ok(c) => c,
            Err(_) => {
                return Ok(builder.finish(Outcome::SystemHalt {
                    reason: crate::model::HaltReason::LlmLimit,
                }))
            }
        };
        let (module_outputs, action) =
            interpret_completion(&completion.text, cfg.strategy, step, admissible.as_deref());
        let mut record = StepRecord {
            index: step,
            observation: current.observation.clone(),
            admissible_actions: admissible,
            module_outputs,
            action: action.clone(),
            env_response: String::new(),
            raw_completion: completion.text,
            token_usage: completion.usage,
        };
        match env.step(&action) {
            Ok(result) => {
                record.env_response = result.observation.clone();
                builder = builder.append_step(record)?;
                current = result;
            }
            Err(e) => match e.halt_reason() {
                Some(reason) => {
                    record.env_response = e.to_string();
                    builder = builder.append_step(record)?;
                    return Ok(builder.finish(Outcome::SystemHalt { reason }));
                }
                None => return Err(e.into()),
            },
        }
    }
    let outcome = if current.done {
        env.outcome()?
    } else {
        // Only reachable when a prefix already filled the cap.
        Outcome::SystemHalt {
            reason: crate::model::HaltReason::StepLimit,
        }
    };
    Ok(builder.finish(outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::GridWorld;
    use crate::fixtures;
    use crate::llm::{LlmClient, Script};
    use crate::model::{CanonicalAction, HaltReason, ModuleKind};
    use crate::taxonomy::ErrorLabel;

    fn mug_env() -> GridWorld {
        GridWorld::new(fixtures::mug_world()).unwrap()
    }

    fn action_reply(a: &str) -> String {
        format!("<plan>do it</plan><action>{a}</action>")
    }

    #[test]
    fn scripted_solution_succeeds_in_six() {
        let client = LlmClient::scripted(Script::sequence(fixtures::MUG_SOLUTION.iter().map(|a| action_reply(a))));
        let mut env = mug_env();
        let t = run_rollout(&RolloutConfig::new(StrategyId::React), &mut env, &client, None, None).unwrap();
        assert_eq!(t.outcome, Outcome::Success);
        assert_eq!(t.len(), 6);
        assert!(t.validate().is_empty(), "{:?}", t.validate());
        assert_eq!(t.steps[0].module_outputs[&ModuleKind::Planning], "do it");
    }

    #[test]
    fn looping_agent_hits_cap() {
        let mut spec = fixtures::mug_world();
        spec.step_cap = 10;
        let mut env = GridWorld::new(spec).unwrap();
        let client = LlmClient::scripted(Script::constant(action_reply("go to cabinet 1")));
        let t = run_rollout(&RolloutConfig::new(StrategyId::React), &mut env, &client, None, None).unwrap();
        assert_eq!(t.outcome, Outcome::SystemHalt { reason: HaltReason::StepLimit });
        assert_eq!(t.len(), 10);
        assert!(t.validate().is_empty());
    }

    #[test]
    fn llm_failure_is_llm_limit() {
        let client = LlmClient::scripted(Script::sequence([action_reply("go to cabinet 1")]));
        let t = run_rollout(&RolloutConfig::new(StrategyId::React), &mut mug_env(), &client, None, None).unwrap();
        assert_eq!(t.outcome, Outcome::SystemHalt { reason: HaltReason::LlmLimit });
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn env_fault_is_recorded() {
        let mut spec = fixtures::mug_world();
        spec.fault = Some(crate::env::gridworld::FaultSpec {
            at_step: 2,
            kind: crate::env::gridworld::FaultKind::EnvironmentError,
            message: "simulator died".into(),
        });
        let mut env = GridWorld::new(spec).unwrap();
        let client = LlmClient::scripted(Script::sequence(fixtures::MUG_SOLUTION.iter().map(|a| action_reply(a))));
        let t = run_rollout(&RolloutConfig::new(StrategyId::React), &mut env, &client, None, None).unwrap();
        assert_eq!(t.outcome, Outcome::SystemHalt { reason: HaltReason::EnvironmentError });
        assert_eq!(t.len(), 2);
        assert!(t.steps[1].env_response.contains("simulator died"));
    }

    #[test]
    fn prefix_preserved_and_feedback_from_target() {
        let source = fixtures::failed_fixture(3).trajectory;
        let prefix = source.truncate_before(4).unwrap();
        let fb = Feedback {
            target_step: 4,
            error_label: ErrorLabel::new(ModuleKind::Planning, "inefficient_planning").unwrap(),
            guidance: "Go back to the cabinet.".into(),
            attempt_index: 1,
            prior_guidance: vec![],
        };
        let client = LlmClient::scripted(Script::sequence([action_reply("look")]));
        let mut spec = fixtures::failed_fixture(3).world;
        spec.step_cap = 6;
        let mut env = GridWorld::new(spec).unwrap();
        let cfg = RolloutConfig::new(source.strategy);
        let t = run_rollout(&cfg, &mut env, &client, Some(&prefix), Some(&fb)).unwrap();
        assert_eq!(t.steps[..3], source.steps[..3]);
        assert_eq!(t.feedback_applied.as_ref(), Some(&fb));

        let wrong = Feedback { target_step: 2, ..fb };
        let mut env = GridWorld::new(fixtures::failed_fixture(3).world).unwrap();
        assert!(matches!(
            run_rollout(&cfg, &mut env, &client, Some(&prefix), Some(&wrong)),
            Err(RolloutError::FeedbackTarget { .. })
        ));
    }

    #[test]
    fn feedback_reaches_prompts() {
        let fb = Feedback {
            target_step: 1,
            error_label: ErrorLabel::new(ModuleKind::Action, "parameter_error").unwrap(),
            guidance: "UNIQUE-GUIDANCE-MARKER".into(),
            attempt_index: 1,
            prior_guidance: vec![],
        };
        let script = Script::sequence([action_reply("dance")]).with_rule(crate::llm::ScriptRule::new(
            ["UNIQUE-GUIDANCE-MARKER"],
            action_reply("go to cabinet 1"),
        ));
        let client = LlmClient::scripted(script);
        let mut spec = fixtures::mug_world();
        spec.step_cap = 3;
        let t = run_rollout(&RolloutConfig::new(StrategyId::React), &mut GridWorld::new(spec).unwrap(), &client, None, Some(&fb)).unwrap();
        assert!(t.steps.iter().all(|s| s.action == CanonicalAction::env("go to cabinet 1")));
    }

    #[test]
    fn deterministic() {
        let run = || {
            let client = LlmClient::scripted(fixtures::planted_agent_script(3));
            let mut env = GridWorld::new(fixtures::failed_fixture(3).world).unwrap();
            run_rollout(&RolloutConfig::new(StrategyId::Modular), &mut env, &client, None, None).unwrap().to_json()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cap_mismatch_rejected() {
        let mut cfg = RolloutConfig::new(StrategyId::React);
        cfg.step_cap = Some(99);
        let client = LlmClient::scripted(Script::sequence(["x"]));
        assert!(matches!(run_rollout(&cfg, &mut mug_env(), &client, None, None), Err(RolloutError::Config(_))));
    }

    #[test]
    fn file_names() {
        assert_eq!(trajectory_file_name("task-7", 0), "task-7.0.json");
    }
}
