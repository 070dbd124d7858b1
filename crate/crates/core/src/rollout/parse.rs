//! Tagged-completion parsing and action normalization.

use std::collections::BTreeMap;

use crate::llm::json::extract_json;
use crate::model::{normalize_whitespace, CanonicalAction, ModuleKind, StrategyId};

/// Innermost content of `<tag>...</tag>`, matched case-insensitively:
/// the first closing tag paired with the nearest opening tag before it.
pub fn extract_tag(text: &str, tag: &str) -> Option<String> {
    // ASCII lowercasing keeps byte offsets aligned with `text`.
    let lower = text.to_ascii_lowercase();
    let open = format!("<{}>", tag.to_ascii_lowercase());
    let close = format!("</{}>", tag.to_ascii_lowercase());
    let end = lower.find(&close)?;
    let start = lower[..end].rfind(&open)? + open.len();
    Some(text[start..end].to_string())
}

const MODULE_TAGS: &[(ModuleKind, &[&str])] = &[
    (ModuleKind::Memory, &["memory", "memory_recall"]),
    (ModuleKind::Reflection, &["reflection"]),
    (ModuleKind::Planning, &["plan"]),
    (ModuleKind::Action, &["action"]),
];

/// Splits a completion into module outputs and the raw action.
///
/// Only modules the strategy emits at `step` are kept. An `<answer>` with
/// content wins over `<action>`; with neither, the action is invalid and
/// keeps the whole text.
pub fn parse_agent_completion(
    text: &str,
    strategy: StrategyId,
    step: u32,
) -> (BTreeMap<ModuleKind, String>, CanonicalAction) {
    let allowed = strategy.modules_at(step);
    let mut outputs = BTreeMap::new();
    for (module, tags) in MODULE_TAGS {
        if !allowed.contains(module) {
            continue;
        }
        if let Some(body) = tags.iter().find_map(|t| extract_tag(text, t)) {
            outputs.insert(*module, body.trim().to_string());
        }
    }
    let action = match extract_tag(text, "answer").filter(|a| !a.trim().is_empty()) {
        Some(answer) => CanonicalAction::answer(&answer),
        None => match extract_tag(text, "action") {
            Some(body) => parse_action_body(&body),
            None => CanonicalAction::invalid(text),
        },
    };
    (outputs, action)
}

fn strip_prefix_ci<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    let head = text.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &text[prefix.len()..])
}

/// An `<action>` body: `action: [name] parameters: {...}` (or `tool:`)
/// becomes a tool call, anything else an environment action.
pub fn parse_action_body(body: &str) -> CanonicalAction {
    let trimmed = body.trim();
    let Some(rest) = strip_prefix_ci(trimmed, "action:").or_else(|| strip_prefix_ci(trimmed, "tool:"))
    else {
        return CanonicalAction::env(trimmed);
    };
    let lower = rest.to_ascii_lowercase();
    let (name_part, params_part) = match lower.find("parameters:") {
        Some(i) => (&rest[..i], Some(&rest[i + "parameters:".len()..])),
        None => (rest, None),
    };
    let name = name_part.trim().trim_start_matches('[').trim_end_matches(']').trim();
    let parameters = match params_part {
        None => BTreeMap::new(),
        Some(p) => match extract_json(p) {
            Ok(serde_json::Value::Object(map)) => map.into_iter().collect(),
            _ => return CanonicalAction::invalid(body),
        },
    };
    match CanonicalAction::tool(name, parameters) {
        CanonicalAction::Invalid { .. } => CanonicalAction::invalid(body),
        ok => ok,
    }
}

/// Maps raw action text onto the admissible list when one is given:
/// exact match after whitespace normalization, then a unique
/// case-insensitive match, then a unique case-insensitive prefix. Anything
/// else passes through for the environment to judge.
pub fn normalize_action(raw: &str, admissible: Option<&[String]>) -> CanonicalAction {
    let norm = normalize_whitespace(raw);
    let Some(list) = admissible else {
        return CanonicalAction::env(&norm);
    };
    let candidates: Vec<String> = list.iter().map(|a| normalize_whitespace(a)).collect();
    if candidates.contains(&norm) {
        return CanonicalAction::env(&norm);
    }
    let lower = norm.to_lowercase();
    let equal: Vec<&String> = candidates.iter().filter(|c| c.to_lowercase() == lower).collect();
    if let [only] = equal.as_slice() {
        return CanonicalAction::env(only);
    }
    if !lower.is_empty() {
        let prefixed: Vec<&String> = candidates
            .iter()
            .filter(|c| c.to_lowercase().starts_with(&lower))
            .collect();
        if let [only] = prefixed.as_slice() {
            return CanonicalAction::env(only);
        }
    }
    CanonicalAction::env(&norm)
}

/// Parse followed by normalization; the pipeline the rollout engine uses,
/// and the one trajectory validation re-runs.
pub fn interpret_completion(
    text: &str,
    strategy: StrategyId,
    step: u32,
    admissible: Option<&[String]>,
) -> (BTreeMap<ModuleKind, String>, CanonicalAction) {
    let (outputs, action) = parse_agent_completion(text, strategy, step);
    let action = match action {
        CanonicalAction::EnvAction { text } => normalize_action(&text, admissible),
        other => other,
    };
    (outputs, action)
}
