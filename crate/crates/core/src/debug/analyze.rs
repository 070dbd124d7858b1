//! Stage 2: critical-step diagnosis, the direct-prompting baseline, and
//! feedback refinement.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::detect::{detect_all, ErrorProfile};
use super::{DebugConfig, DebugError};
use crate::llm::{complete_json, ChatModel};
use crate::model::{Feedback, ModuleKind, Trajectory};
use crate::prompts;
use crate::taxonomy::{parse_error_label, render_error_definitions, DefinitionScope, ErrorLabel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeEffect {
    pub step: u32,
    pub impact: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalDiagnosis {
    pub critical_step: u32,
    pub critical_module: ModuleKind,
    pub error_label: ErrorLabel,
    pub root_cause: String,
    pub evidence: String,
    pub correction_guidance: String,
    #[serde(default)]
    pub cascading_effects: Vec<CascadeEffect>,
}

impl CriticalDiagnosis {
    /// Range, cascade order, label/module agreement, and the step-1 rule.
    pub fn check(&self, t_max: u32) -> Result<(), DebugError> {
        let invalid = |m: String| Err(DebugError::InvalidDiagnosis(m));
        if self.critical_step == 0 || self.critical_step > t_max {
            return invalid(format!("critical_step {} outside 1..={t_max}", self.critical_step));
        }
        if self.error_label.module != self.critical_module {
            return invalid(format!("label {} under module {}", self.error_label, self.critical_module));
        }
        if self.error_label.is_no_error() {
            return invalid("critical error labelled no_error".into());
        }
        if self.critical_step == 1
            && matches!(self.critical_module, ModuleKind::Memory | ModuleKind::Reflection)
        {
            return invalid(format!("{} cannot be critical at step 1", self.critical_module));
        }
        if let Some(c) = self.cascading_effects.iter().find(|c| c.step < self.critical_step) {
            return invalid(format!("cascading effect at step {} precedes critical step", c.step));
        }
        Ok(())
    }
}

/// The seed feedback for the first re-rollout.
pub fn feedback_from_diagnosis(d: &CriticalDiagnosis) -> Feedback {
    Feedback {
        target_step: d.critical_step,
        error_label: d.error_label,
        guidance: d.correction_guidance.clone(),
        attempt_index: 1,
        prior_guidance: Vec::new(),
    }
}

/// Step-by-step text for the diagnosis prompt: each step's input, module
/// outputs, action, response, and its Stage-1 findings.
pub fn render_all_steps(trajectory: &Trajectory, profile: &ErrorProfile) -> String {
    let mut out = String::new();
    for s in &trajectory.steps {
        let _ = writeln!(out, "Step {}:", s.index);
        let _ = writeln!(out, "  Observation: {}", s.observation);
        for (m, text) in &s.module_outputs {
            if *m != ModuleKind::Action {
                let _ = writeln!(out, "  {m}: {text}");
            }
        }
        let _ = writeln!(out, "  Action: {}", s.action);
        let _ = writeln!(out, "  Environment response: {}", s.env_response);
        let _ = writeln!(out, "  Detected errors:");
        let mut any = false;
        for d in profile.at(s.index).filter(|d| d.error_detected) {
            any = true;
            let _ = writeln!(out, "  - {}: {} (evidence: {})", d.module, d.error_label.error_type, d.evidence);
        }
        if !any {
            let _ = writeln!(out, "  - none");
        }
    }
    let _ = writeln!(out, "Final outcome: {}", trajectory.outcome);
    out
}

fn previous_instructions(prior: &[String]) -> String {
    if prior.is_empty() {
        return "  (none)".to_string();
    }
    prior
        .iter()
        .enumerate()
        .map(|(i, g)| format!("  {}. {g}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

fn field(v: &Value, key: &str) -> String {
    match v.get(key) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    }
}

fn step_number(v: Option<&Value>) -> Result<Option<u32>, DebugError> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => match n.as_i64() {
            Some(i) if i >= 0 && i <= u32::MAX as i64 => Ok(Some(i as u32)),
            _ => Err(DebugError::InvalidDiagnosis(format!("step {n}"))),
        },
        Some(Value::String(s)) => s
            .trim()
            .parse::<u32>()
            .map(Some)
            .map_err(|_| DebugError::JudgeParseFailure(format!("step `{s}`"))),
        Some(other) => Err(DebugError::JudgeParseFailure(format!("step {other}"))),
    }
}

fn parse_diagnosis(v: &Value, t_max: u32) -> Result<CriticalDiagnosis, DebugError> {
    let critical_step = step_number(v.get("critical_step"))?.ok_or(DebugError::NotFound)?;
    let module_text = field(v, "critical_module");
    let type_text = field(v, "error_type");
    let error_label = parse_error_label(&module_text, &type_text)
        .map_err(|e| DebugError::InvalidDiagnosis(e.to_string()))?;
    let mut cascading_effects = Vec::new();
    if let Some(Value::Array(items)) = v.get("cascading_effects") {
        for item in items {
            let Some(step) = step_number(item.get("step"))? else {
                continue;
            };
            cascading_effects.push(CascadeEffect {
                step,
                impact: field(item, "impact"),
            });
        }
    }
    let d = CriticalDiagnosis {
        critical_step,
        critical_module: error_label.module,
        error_label,
        root_cause: field(v, "root_cause"),
        evidence: field(v, "evidence"),
        correction_guidance: field(v, "correction_guidance"),
        cascading_effects,
    };
    d.check(t_max)?;
    Ok(d)
}

/// Asks the judge for the earliest critical error of a failed trajectory.
/// A `null` critical step is reported as [`DebugError::NotFound`].
pub fn analyze_critical(
    trajectory: &Trajectory,
    profile: &ErrorProfile,
    attempt_index: u32,
    prior_guidance: &[String],
    config: &DebugConfig,
    judge: &dyn ChatModel,
) -> Result<CriticalDiagnosis, DebugError> {
    if trajectory.outcome.is_success() {
        return Err(DebugError::Precondition("trajectory already succeeded".into()));
    }
    let definitions = render_error_definitions(DefinitionScope::All);
    let mut b = BTreeMap::new();
    b.insert("task_description", trajectory.task_description.clone());
    b.insert("attempt_index", attempt_index.to_string());
    b.insert("previous_instructions", previous_instructions(prior_guidance));
    b.insert("all_steps", render_all_steps(trajectory, profile));
    b.insert(
        "error_reference",
        definitions
            .strip_prefix("ERROR DEFINITIONS:\n")
            .unwrap_or(&definitions)
            .trim_start()
            .to_string(),
    );
    let prompt = prompts::template(prompts::AGENTDEBUG)
        .render(&b)
        .map_err(|e| DebugError::Rollout(e.into()))?;
    let (value, _) = complete_json(judge, &config.judge_request(prompt), config.json_retries)?;
    parse_diagnosis(&value, trajectory.len() as u32)
}

/// Zero-based step listing used by the single-shot baselines.
pub fn render_trajectory_zero_based(trajectory: &Trajectory) -> String {
    let mut out = format!("Task: {}\n", trajectory.task_description);
    for s in &trajectory.steps {
        let _ = writeln!(out, "[Step {}]", s.index - 1);
        let _ = writeln!(out, "Observation: {}", s.observation);
        for (m, text) in &s.module_outputs {
            if *m != ModuleKind::Action {
                let _ = writeln!(out, "{}: {text}", m.as_str());
            }
        }
        let _ = writeln!(out, "Action: {}", s.action);
        let _ = writeln!(out, "Result: {}", s.env_response);
    }
    let _ = write!(out, "Outcome: {}", trajectory.outcome);
    out
}

fn line_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| {
        let l = l.trim();
        let (k, v) = l.split_once(':')?;
        k.trim().eq_ignore_ascii_case(key).then(|| v.trim())
    })
}

/// Single-shot localization without a Stage-1 profile. The reply's step
/// is zero-based; module and label are `others/other` because the
/// baseline produces neither.
pub fn direct_prompt_localize(
    trajectory: &Trajectory,
    config: &DebugConfig,
    judge: &dyn ChatModel,
) -> Result<CriticalDiagnosis, DebugError> {
    let mut b = BTreeMap::new();
    b.insert("trajectory", render_trajectory_zero_based(trajectory));
    let prompt = prompts::template(prompts::VANILLA_DEBUG)
        .render(&b)
        .map_err(|e| DebugError::Rollout(e.into()))?;
    let reply = judge.complete(&config.judge_request(prompt))?.text;
    let missing = |k: &str| DebugError::LineFormatParseFailure(format!("missing `{k}:` line"));
    let step_text = line_value(&reply, "step").ok_or_else(|| missing("step"))?;
    let reason = line_value(&reply, "reason").ok_or_else(|| missing("reason"))?;
    let suggestion = line_value(&reply, "suggestion").ok_or_else(|| missing("suggestion"))?;
    let zero_based: u32 = step_text
        .trim_matches(|c: char| !c.is_ascii_digit())
        .parse()
        .map_err(|_| DebugError::LineFormatParseFailure(format!("step `{step_text}`")))?;
    let d = CriticalDiagnosis {
        critical_step: zero_based + 1,
        critical_module: ModuleKind::Others,
        error_label: ErrorLabel::other(ModuleKind::Others),
        root_cause: reason.to_string(),
        evidence: String::new(),
        correction_guidance: suggestion.to_string(),
        cascading_effects: Vec::new(),
    };
    d.check(trajectory.len() as u32)?;
    Ok(d)
}

/// Re-diagnoses a failed re-rollout. The attempt index advances, the
/// previous guidance joins the history, and the target step never moves
/// later than before.
pub fn update_feedback(
    previous: &Feedback,
    failed: &Trajectory,
    config: &DebugConfig,
    judge: &dyn ChatModel,
) -> Result<(Feedback, CriticalDiagnosis), DebugError> {
    if failed.outcome.is_success() {
        return Err(DebugError::Precondition("re-rollout succeeded".into()));
    }
    let mut prior = previous.prior_guidance.clone();
    prior.push(previous.guidance.clone());
    let profile = detect_all(failed, config, judge)?;
    let d = analyze_critical(failed, &profile, previous.attempt_index + 1, &prior, config, judge)?;
    let fb = Feedback {
        target_step: d.critical_step.min(previous.target_step),
        error_label: d.error_label,
        guidance: d.correction_guidance.clone(),
        attempt_index: previous.attempt_index + 1,
        prior_guidance: prior,
    };
    Ok((fb, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::llm::{LlmClient, Script, ScriptRule};
    use serde_json::json;

    const NO_ERR: &str = r#"{"error_type": "no_error"}"#;

    fn diag(step: Value, module: &str, ty: &str, cascade: &[u32]) -> String {
        json!({
            "critical_step": step,
            "critical_module": module,
            "error_type": ty,
            "root_cause": "rc",
            "evidence": "ev",
            "correction_guidance": "do better",
            "cascading_effects": cascade.iter().map(|s| json!({"step": s, "impact": "x"})).collect::<Vec<_>>(),
        })
        .to_string()
    }

    fn judge(analysis: String) -> LlmClient {
        LlmClient::scripted(
            Script::constant(NO_ERR).with_rule(ScriptRule::new(["identify the CRITICAL ERROR"], analysis)),
        )
    }

    fn run(analysis: String) -> Result<CriticalDiagnosis, DebugError> {
        let traj = fixtures::modular_t5_trajectory();
        let cfg = DebugConfig::default();
        let j = judge(analysis);
        let profile = detect_all(&traj, &cfg, &j).unwrap();
        analyze_critical(&traj, &profile, 1, &[], &cfg, &j)
    }

    #[test]
    fn valid_diagnosis() {
        let d = run(diag(json!(3), "planning", "inefficient_planning", &[4, 5])).unwrap();
        assert_eq!(d.critical_step, 3);
        assert_eq!(d.error_label.to_string(), "planning/inefficient_planning");
        assert_eq!(d.correction_guidance, "do better");
        assert_eq!(d.cascading_effects.len(), 2);
    }

    #[test]
    fn rejected_diagnoses() {
        let bad = [
            diag(json!(0), "planning", "inefficient_planning", &[]),
            diag(json!(6), "planning", "inefficient_planning", &[]),
            diag(json!(3), "planning", "inefficient_planning", &[2]),
            diag(json!(3), "planning", "format_error", &[]),
            diag(json!(1), "memory", "hallucination", &[]),
            diag(json!(3), "planning", "no_error", &[]),
        ];
        for b in bad {
            assert!(matches!(run(b.clone()), Err(DebugError::InvalidDiagnosis(_))), "{b}");
        }
        assert_eq!(run(diag(Value::Null, "planning", "x", &[])), Err(DebugError::NotFound));
    }

    #[test]
    fn successful_input_rejected() {
        let traj = fixtures::solved_mug_trajectory();
        let profile = ErrorProfile { trajectory_id: traj.task_id.clone(), detections: vec![] };
        let j = judge(String::new());
        assert!(matches!(
            analyze_critical(&traj, &profile, 1, &[], &DebugConfig::default(), &j),
            Err(DebugError::Precondition(_))
        ));
        assert_eq!(j.call_count(), 0);
    }

    #[test]
    fn prompt_carries_attempt_and_history() {
        let traj = fixtures::modular_t5_trajectory();
        let cfg = DebugConfig::default();
        let j = LlmClient::scripted(Script::constant(NO_ERR).with_rule(ScriptRule::new(
            ["Current debug attempt index: 3", "1. first", "2. second", "SYSTEM ERRORS:"],
            diag(json!(2), "action", "format_error", &[]),
        )));
        let profile = detect_all(&traj, &cfg, &j).unwrap();
        let d = analyze_critical(&traj, &profile, 3, &["first".into(), "second".into()], &cfg, &j).unwrap();
        assert_eq!(d.critical_step, 2);
    }

    #[test]
    fn direct_prompt_is_zero_based() {
        let traj = fixtures::modular_t5_trajectory();
        let cfg = DebugConfig::default();
        let ok = LlmClient::scripted(Script::constant("step: 2\nreason: r\nsuggestion: s"));
        let d = direct_prompt_localize(&traj, &cfg, &ok).unwrap();
        assert_eq!(d.critical_step, 3);
        assert_eq!(d.error_label.to_string(), "others/other");
        assert_eq!(d.correction_guidance, "s");

        let missing = LlmClient::scripted(Script::constant("step: 2\nreason: r"));
        assert!(matches!(direct_prompt_localize(&traj, &cfg, &missing), Err(DebugError::LineFormatParseFailure(_))));
        let beyond = LlmClient::scripted(Script::constant("step: 9\nreason: r\nsuggestion: s"));
        assert!(matches!(direct_prompt_localize(&traj, &cfg, &beyond), Err(DebugError::InvalidDiagnosis(_))));
    }

    fn prev(target: u32) -> Feedback {
        Feedback {
            target_step: target,
            error_label: ErrorLabel::new(ModuleKind::Planning, "inefficient_planning").unwrap(),
            guidance: "g1".into(),
            attempt_index: 1,
            prior_guidance: vec![],
        }
    }

    #[test]
    fn update_feedback_bookkeeping() {
        let traj = fixtures::modular_t5_trajectory();
        let cfg = DebugConfig::default();
        let (fb, _) = update_feedback(&prev(3), &traj, &cfg, &judge(diag(json!(5), "action", "format_error", &[]))).unwrap();
        assert_eq!((fb.attempt_index, fb.prior_guidance.clone(), fb.target_step), (2, vec!["g1".to_string()], 3));
        assert!(fb.is_consistent());
        let (fb, _) = update_feedback(&prev(3), &traj, &cfg, &judge(diag(json!(2), "action", "format_error", &[]))).unwrap();
        assert_eq!(fb.target_step, 2);
    }
}
