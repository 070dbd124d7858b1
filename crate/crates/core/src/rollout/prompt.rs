//! Step prompt assembly from the bundled rollout templates.

use std::collections::BTreeMap;

use crate::llm::template::TemplateError;
use crate::model::{Feedback, StepRecord, StrategyId};
use crate::prompts;

use super::{RolloutConfig, TemplateSet};

/// One line per step for the last `k` steps, oldest first: the step
/// number, a U+2014 dash, then observation, action, and result. Observations longer than `obs_limit` characters
/// are cut and marked with `…`.
pub fn format_action_history(steps: &[StepRecord], k: usize, obs_limit: usize) -> String {
    let start = steps.len().saturating_sub(k);
    steps[start..]
        .iter()
        .map(|s| {
            format!(
                "Step {} \u{2014} Observation: {}; Action: {}; Result: {}",
                s.index,
                truncate_chars(&s.observation, obs_limit),
                s.action,
                s.env_response
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn truncate_chars(text: &str, limit: usize) -> String {
    if text.chars().count() <= limit {
        return text.to_string();
    }
    let mut out: String = text.chars().take(limit).collect();
    out.push('\u{2026}');
    out
}

/// Admissible list as it appears in prompts.
pub fn format_admissible(admissible: Option<&[String]>) -> String {
    match admissible {
        Some(list) => {
            let quoted: Vec<String> = list.iter().map(|a| format!("'{a}'")).collect();
            format!("[{}]", quoted.join(", "))
        }
        None => "(not provided)".to_string(),
    }
}

/// The delimited feedback block injected into re-rollout prompts.
pub fn render_feedback(feedback: &Feedback) -> Result<String, TemplateError> {
    let prior = if feedback.prior_guidance.is_empty() {
        String::new()
    } else {
        let mut s = String::from("- Earlier guidance:\n");
        for (i, g) in feedback.prior_guidance.iter().enumerate() {
            s.push_str(&format!("  {}. {}\n", i + 1, g));
        }
        s
    };
    let mut b = BTreeMap::new();
    b.insert("target_step", feedback.target_step.to_string());
    b.insert("error_label", feedback.error_label.to_string());
    b.insert("guidance", feedback.guidance.clone());
    b.insert("prior_guidance", prior);
    prompts::template(prompts::FEEDBACK).render(&b)
}

fn admissible_key(set: TemplateSet) -> &'static str {
    match set {
        TemplateSet::Alfworld | TemplateSet::Gridworld => "admissible_actions",
        TemplateSet::Webshop => "available_actions",
        TemplateSet::Gaia => "available_tools",
    }
}

const FEEDBACK_SLOT: &str = "{feedback_block}";

/// Section list for one prompt; `{feedback_block}` sits between the
/// situation description and the tag instructions.
fn sections(config: &RolloutConfig, step: u32, last_step: bool) -> Vec<String> {
    let set = config.template_set.file();
    let s = |name: &str| format!("{set}.{name}");
    let gaia = config.template_set == TemplateSet::Gaia;
    if step == 1 {
        if gaia {
            return vec![s("no_his_head"), FEEDBACK_SLOT.into(), s("no_his_body")];
        }
        let mut v = vec![s("no_his_head"), FEEDBACK_SLOT.into()];
        if config.strategy != StrategyId::ActOnly {
            v.push(s("plan_first"));
        }
        v.push(s("action_first"));
        return v;
    }
    if last_step {
        return vec![s("last_step_head"), FEEDBACK_SLOT.into(), s("last_step_body")];
    }
    let mut v = vec![s("head"), FEEDBACK_SLOT.into()];
    let tags: &[&str] = match config.strategy {
        StrategyId::Modular => &["memory", "reflection", "plan", "action"],
        StrategyId::React if !gaia => &["plan_first", "action"],
        StrategyId::React => &["plan", "action"],
        StrategyId::Reflection => &["reflection", "plan", "action"],
        StrategyId::ActOnly => &["action"],
        StrategyId::MemoryReact => &["memory", "plan", "action"],
    };
    v.extend(tags.iter().map(|t| s(t)));
    v
}

/// Renders the prompt for the next step.
///
/// Step 1 uses the no-history variant. Later steps use the history variant
/// with `{step_count}` = steps so far, `{history_length}` = min(K, steps so
/// far), and the formatted window. GAIA's final-step variant shows the full
/// history when `full_history_last_step` is set. The feedback block is
/// included when given; callers decide from which step on.
pub fn build_step_prompt(
    config: &RolloutConfig,
    task_description: &str,
    history: &[StepRecord],
    current_observation: &str,
    admissible: Option<&[String]>,
    feedback: Option<&Feedback>,
) -> Result<String, TemplateError> {
    let step = history.len() as u32 + 1;
    let last_step = config.template_set == TemplateSet::Gaia
        && config.full_history_last_step
        && config.step_cap == Some(step)
        && step > 1;
    let parts = sections(config, step, last_step);
    let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    let id = format!("{}.step", config.template_set.as_str());
    let template = prompts::compose(&id, &refs);

    let mut b: BTreeMap<&str, String> = BTreeMap::new();
    b.insert("task_description", task_description.to_string());
    b.insert("current_observation", current_observation.to_string());
    b.insert(
        "feedback_block",
        match feedback {
            Some(fb) => format!("{}\n", render_feedback(fb)?.trim_end()) + "\n",
            None => String::new(),
        },
    );
    if !last_step {
        b.insert(admissible_key(config.template_set), format_admissible(admissible));
    }
    if step > 1 {
        let window = if last_step { history.len() } else { config.history_window };
        b.insert("step_count", history.len().to_string());
        b.insert("current_step", step.to_string());
        b.insert(
            "action_history",
            format_action_history(history, window, config.observation_char_limit),
        );
        if config.template_set != TemplateSet::Webshop {
            b.insert("history_length", history.len().min(window).to_string());
        }
    }
    template.render(&b)
}
