//! Stage 1: per-step, per-module error detection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DebugConfig, DebugError};
use crate::llm::{complete_json, ChatModel};
use crate::model::{HaltReason, ModuleKind, Outcome, Trajectory};
use crate::prompts;
use crate::rollout::build_step_prompt;
use crate::taxonomy::{parse_error_label, render_error_definitions, DefinitionScope, ErrorLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetection {
    pub step: u32,
    pub module: ModuleKind,
    /// Always `!error_label.is_no_error()`.
    pub error_detected: bool,
    pub error_label: ErrorLabel,
    pub evidence: String,
    pub reasoning: String,
}

impl ErrorDetection {
    pub fn new(step: u32, label: ErrorLabel, evidence: String, reasoning: String) -> Self {
        Self {
            step,
            module: label.module,
            error_detected: !label.is_no_error(),
            error_label: label,
            evidence,
            reasoning,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    pub trajectory_id: String,
    pub detections: Vec<ErrorDetection>,
}

impl ErrorProfile {
    pub fn at(&self, step: u32) -> impl Iterator<Item = &ErrorDetection> {
        self.detections.iter().filter(move |d| d.step == step)
    }

    /// Steps with at least one detected error, ascending.
    pub fn error_steps(&self) -> Vec<u32> {
        let mut steps: Vec<u32> = self
            .detections
            .iter()
            .filter(|d| d.error_detected)
            .map(|d| d.step)
            .collect();
        steps.dedup();
        steps
    }

    /// Profile invariants: no duplicate (step, module) pair and no
    /// memory/reflection entry at step 1.
    pub fn check(&self) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.detections {
            if !seen.insert((d.step, d.module)) {
                return Err(format!("duplicate detection for step {} {}", d.step, d.module));
            }
            if d.step == 1 && matches!(d.module, ModuleKind::Memory | ModuleKind::Reflection) {
                return Err(format!("{} detection at step 1", d.module));
            }
            if d.error_detected == d.error_label.is_no_error() || d.module != d.error_label.module {
                return Err(format!("inconsistent detection at step {} {}", d.step, d.module));
            }
        }
        Ok(())
    }
}

/// Text of the agent's input at `step`: the step prompt as the agent saw it.
pub(crate) fn step_context(
    trajectory: &Trajectory,
    step: u32,
    config: &DebugConfig,
) -> Result<String, DebugError> {
    let record = trajectory
        .step(step)
        .ok_or_else(|| DebugError::Precondition(format!("step {step} out of range")))?;
    let cfg = config.rollout_for(trajectory);
    let history = &trajectory.steps[..(step - 1) as usize];
    let feedback = trajectory
        .feedback_applied
        .as_ref()
        .filter(|fb| step >= fb.target_step);
    build_step_prompt(
        &cfg,
        &trajectory.task_description,
        history,
        &record.observation,
        record.admissible_actions.as_deref(),
        feedback,
    )
    .map_err(|e| DebugError::Rollout(e.into()))
}

fn text_field(v: &Value, key: &str) -> String {
    match v.get(key) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    }
}

/// Judges one (step, module) pair with the detector prompt.
pub fn detect_step_errors(
    trajectory: &Trajectory,
    step: u32,
    module: ModuleKind,
    config: &DebugConfig,
    judge: &dyn ChatModel,
) -> Result<ErrorDetection, DebugError> {
    if !trajectory.strategy.modules_at(step).contains(&module) {
        return Err(DebugError::Precondition(format!(
            "{module} is not produced at step {step} under {}",
            trajectory.strategy
        )));
    }
    let record = trajectory
        .step(step)
        .ok_or_else(|| DebugError::Precondition(format!("step {step} out of range")))?;
    let module_content = match record.module_outputs.get(&module) {
        Some(text) => text.clone(),
        None if module == ModuleKind::Action => record.action.to_string(),
        None => "(no output)".to_string(),
    };
    let mut b = BTreeMap::new();
    b.insert("task_description", trajectory.task_description.clone());
    b.insert("environment", trajectory.env_name.clone());
    b.insert("step_num", step.to_string());
    b.insert("context", step_context(trajectory, step, config)?);
    b.insert("module_name", module.as_str().to_string());
    b.insert("module_content", module_content);
    b.insert("env_response", record.env_response.clone());
    b.insert(
        "error_definitions",
        render_error_definitions(DefinitionScope::Module(module)),
    );
    let prompt = prompts::template(prompts::DETECTOR)
        .render(&b)
        .map_err(|e| DebugError::Rollout(e.into()))?;
    let (value, _) = complete_json(judge, &config.judge_request(prompt), config.json_retries)?;
    let error_type = match value.get("error_type") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err(DebugError::JudgeParseFailure("missing error_type".into())),
    };
    let label = parse_error_label(module.as_str(), &error_type)?;
    if label.module != module {
        return Err(DebugError::JudgeParseFailure(format!(
            "label {label} for module {module}"
        )));
    }
    Ok(ErrorDetection::new(
        step,
        label,
        text_field(&value, "evidence"),
        text_field(&value, "reasoning"),
    ))
}

/// Rule-based system detection for one step: the halt reason at the final
/// step of a halted trajectory, `no_error` elsewhere.
pub fn system_detection(trajectory: &Trajectory, step: u32) -> ErrorDetection {
    let last = step as usize == trajectory.len();
    match trajectory.outcome {
        Outcome::SystemHalt { reason } if last => {
            let label = ErrorLabel::new(ModuleKind::System, reason.as_str())
                .expect("halt reasons are catalog ids");
            let evidence = match reason {
                HaltReason::StepLimit => format!(
                    "step {step} reached the step cap of {}",
                    trajectory.step_cap.unwrap_or(step)
                ),
                _ => trajectory
                    .step(step)
                    .map(|s| s.env_response.clone())
                    .unwrap_or_default(),
            };
            ErrorDetection::new(step, label, evidence, format!("episode ended with {}", trajectory.outcome))
        }
        _ => ErrorDetection::new(step, ErrorLabel::no_error(ModuleKind::System), String::new(), String::new()),
    }
}

/// Every (step, module) pair the strategy produces, followed by a system
/// entry, step by step.
pub fn detect_all(
    trajectory: &Trajectory,
    config: &DebugConfig,
    judge: &dyn ChatModel,
) -> Result<ErrorProfile, DebugError> {
    let mut detections = Vec::new();
    for record in &trajectory.steps {
        let step = record.index;
        for &module in trajectory.strategy.modules_at(step) {
            detections.push(detect_step_errors(trajectory, step, module, config, judge)?);
        }
        detections.push(system_detection(trajectory, step));
    }
    Ok(ErrorProfile {
        trajectory_id: trajectory.task_id.clone(),
        detections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::llm::{LlmClient, Script, ScriptRule};
    use crate::model::StrategyId;
    use proptest::prelude::*;

    fn reply(t: &str) -> String {
        format!(r#"{{"error_detected": {}, "error_type": "{t}", "evidence": "e", "reasoning": "r"}}"#, t != "no_error")
    }

    #[test]
    fn modular_t5_has_23_detections() {
        let traj = fixtures::modular_t5_trajectory();
        assert_eq!(traj.len(), 5);
        let judge = LlmClient::scripted(Script::constant(reply("no_error")));
        let p = detect_all(&traj, &DebugConfig::default(), &judge).unwrap();
        assert_eq!(p.detections.len(), 23);
        assert_eq!(judge.call_count(), 18);
        p.check().unwrap();
    }

    #[test]
    fn act_only_t3_has_6() {
        let mut traj = fixtures::modular_t5_trajectory();
        traj.strategy = StrategyId::ActOnly;
        traj.steps.truncate(3);
        for s in &mut traj.steps {
            s.module_outputs.retain(|m, _| *m == ModuleKind::Action);
        }
        let judge = LlmClient::scripted(Script::constant(reply("no_error")));
        assert_eq!(detect_all(&traj, &DebugConfig::default(), &judge).unwrap().detections.len(), 6);
    }

    #[test]
    fn step_limit_system_entry() {
        let traj = fixtures::failed_fixture(1).trajectory;
        assert_eq!(traj.outcome, Outcome::SystemHalt { reason: HaltReason::StepLimit });
        let d = system_detection(&traj, traj.len() as u32);
        assert_eq!(d.error_label.to_string(), "system/step_limit");
        assert!(d.error_detected);
        assert!(!system_detection(&traj, 1).error_detected);
    }

    #[test]
    fn judge_labels() {
        let traj = fixtures::modular_t5_trajectory();
        let cfg = DebugConfig::default();
        let script = Script::constant(reply("no_error")).with_rule(ScriptRule::new(
            ["CURRENT STEP: 3", "MODULE TO ANALYZE: planning"],
            reply("constraint_ignorance"),
        ));
        let judge = LlmClient::scripted(script);
        let d = detect_step_errors(&traj, 3, ModuleKind::Planning, &cfg, &judge).unwrap();
        assert_eq!(d.error_label.to_string(), "planning/constraint_ignorance");
        assert!(d.error_detected);
        let d = detect_step_errors(&traj, 2, ModuleKind::Planning, &cfg, &judge).unwrap();
        assert!(!d.error_detected);

        let bad = LlmClient::scripted(Script::constant(reply("made_up_error")));
        assert!(matches!(
            detect_step_errors(&traj, 2, ModuleKind::Planning, &cfg, &bad),
            Err(DebugError::UnknownErrorType(_))
        ));
        assert!(matches!(
            detect_step_errors(&traj, 1, ModuleKind::Memory, &cfg, &bad),
            Err(DebugError::Precondition(_))
        ));
    }

    #[test]
    fn detector_prompt_contents() {
        let traj = fixtures::modular_t5_trajectory();
        let judge = LlmClient::scripted(
            Script::default().with_rule(ScriptRule::new(
                ["You are an expert at detecting errors in agent trajectories.", "MEMORY ERRORS:", "You are now at step 4"],
                reply("no_error"),
            )),
        );
        detect_step_errors(&traj, 4, ModuleKind::Memory, &DebugConfig::default(), &judge).unwrap();
    }

    #[test]
    fn json_retry_then_failure() {
        let traj = fixtures::modular_t5_trajectory();
        let cfg = DebugConfig::default();
        let judge = LlmClient::scripted(Script::sequence(["no json here", &reply("no_error")]));
        assert!(detect_step_errors(&traj, 2, ModuleKind::Action, &cfg, &judge).is_ok());
        let judge = LlmClient::scripted(Script::constant("still no json"));
        assert!(matches!(
            detect_step_errors(&traj, 2, ModuleKind::Action, &cfg, &judge),
            Err(DebugError::JudgeParseFailure(_))
        ));
        assert_eq!(judge.call_count(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fuzzed_judges_stay_in_catalog(ty in "[a-z_ ]{0,24}|\\PC{0,30}", module in prop::sample::select(ModuleKind::REASONING.to_vec())) {
            let traj = fixtures::modular_t5_trajectory();
            let body = serde_json::json!({"error_type": ty, "evidence": 1, "reasoning": null});
            let judge = LlmClient::scripted(Script::constant(body.to_string()));
            if let Ok(d) = detect_step_errors(&traj, 2, module, &DebugConfig::default(), &judge) {
                prop_assert_eq!(d.module, module);
                prop_assert!(d.error_label.is_no_error() || d.error_label.entry().is_some());
                prop_assert_eq!(d.error_detected, !d.error_label.is_no_error());
            }
        }
    }
}
