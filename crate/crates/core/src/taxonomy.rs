//! Closed catalog of agent error types, grouped by module.
//!
//! Every label produced anywhere in the crate is checked against this
//! catalog; there is no way to construct an [`ErrorLabel`] outside it.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModuleKind;

pub const CATALOG_VERSION: u32 = 1;

/// Sentinel id meaning "no error in this module output".
pub const NO_ERROR: &str = "no_error";

/// Catch-all id of the `others` module; pairs with any module.
pub const OTHER: &str = "other";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("unknown module `{0}`")]
    UnknownModule(String),
    #[error("unknown error type `{0}`")]
    UnknownErrorType(String),
    #[error("error type `{error_type}` belongs to {belongs_to}, not {module}")]
    ModuleMismatch {
        module: ModuleKind,
        error_type: String,
        belongs_to: ModuleKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorType {
    pub module: ModuleKind,
    pub id: &'static str,
    pub prose_name: &'static str,
    pub definition: &'static str,
    aliases: &'static [&'static str],
}

macro_rules! entry {
    ($module:ident, $id:literal, $prose:literal, $def:literal $(, $alias:literal)* $(,)?) => {
        ErrorType {
            module: ModuleKind::$module,
            id: $id,
            prose_name: $prose,
            definition: $def,
            aliases: &[$($alias),*],
        }
    };
}

static CATALOG: [ErrorType; 18] = [
    entry!(Memory, "over_simplification", "Over-simplification / Incomplete Summary",
        "Summarizes past info too crudely, ignoring details; leads to flawed reasoning.",
        "over-simplification", "oversimplification", "incomplete summary"),
    entry!(Memory, "hallucination", "Hallucination (False Memory)",
        "Recalls events or states that never happened, filling missing gaps with fabricated info.",
        "false memory"),
    entry!(Memory, "retrieval_failure", "Retrieval Failure",
        "Relevant info exists but is not retrieved when needed."),
    entry!(Reflection, "progress_misassessment", "Progress Misassessment",
        "Incorrectly evaluates progress (too optimistic, too pessimistic, or misses completion)."),
    entry!(Reflection, "outcome_misinterpretation", "Outcome Misinterpretation",
        "Executes an action but misreads the immediate result or environment feedback."),
    entry!(Reflection, "causal_misattribution", "Causal Misattribution",
        "Correctly notes failure but blames the wrong cause, misguiding subsequent plans."),
    entry!(Reflection, "hallucination", "Hallucination",
        "Reflects on events/results that never occurred."),
    entry!(Planning, "constraint_ignorance", "Constraint Ignorance",
        "Ignores limits (time, budget, space, etc.) when forming plans."),
    entry!(Planning, "impossible_action", "Impossible Action",
        "Plans a step that is physically/logically impossible given current preconditions."),
    entry!(Planning, "inefficient_planning", "Inefficient Planning",
        "Plan is overly long or illogical; wastes steps and risks hitting limits."),
    entry!(Action, "planning_action_disconnect", "Planning--Action Disconnect",
        "Chosen actions do not align with the stated plan intent.",
        "plan action disconnect", "planning-action disconnect"),
    entry!(Action, "format_error", "Format Error",
        "Produces syntactically invalid actions."),
    entry!(Action, "parameter_error", "Parameter Error",
        "Generates unreasonable or malformed parameters."),
    entry!(System, "step_limit", "Step Limit Exhaustion",
        "Fails due to reaching the maximum step cap despite reasonable behavior.",
        "step limit exhaustion", "step_limit_exhaustion"),
    entry!(System, "tool_execution_error", "Tool Execution Error",
        "External tool/API misbehaves or errors, causing downstream failures."),
    entry!(System, "llm_limit", "LLM Limit",
        "Fails due to API/model constraints (e.g., timeouts, token limits)."),
    entry!(System, "environment_error", "Environment Error",
        "Simulator/environment breaks expected rules (bug/crash/network), not agent\u{2019}s fault."),
    entry!(Others, "other", "Other",
        "Others category captures unusual failures not covered by standard error types",
        "others"),
];

const NO_ERROR_DEFINITION: &str =
    "The module output matches none of the error definitions above.";

/// The full catalog: 17 leaf types plus `others/other`, in catalog order.
pub fn catalog() -> &'static [ErrorType] {
    &CATALOG
}

/// The error types declared for `module`, in catalog order.
pub fn error_types_for(module: ModuleKind) -> Vec<&'static ErrorType> {
    CATALOG.iter().filter(|e| e.module == module).collect()
}

/// Case-insensitive, separator-tolerant lookup key. Every run of
/// non-alphanumeric characters collapses to a single `_`.
pub fn normalize_key(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_sep = false;
    for c in text.trim().chars() {
        if c.is_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.extend(c.to_lowercase());
        } else {
            pending_sep = true;
        }
    }
    out
}

impl ErrorType {
    fn matches_key(&self, key: &str) -> bool {
        normalize_key(self.id) == key
            || normalize_key(self.prose_name) == key
            || self.aliases.iter().any(|a| normalize_key(a) == key)
    }
}

/// A (module, error type) pair validated against the catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ErrorLabel {
    pub module: ModuleKind,
    pub error_type: &'static str,
}

#[derive(Deserialize)]
struct RawLabel {
    module: ModuleKind,
    error_type: String,
}

impl<'de> Deserialize<'de> for ErrorLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawLabel::deserialize(d)?;
        ErrorLabel::new(raw.module, &raw.error_type).map_err(serde::de::Error::custom)
    }
}

impl ErrorLabel {
    /// Strict constructor: `error_type` must be an exact catalog id.
    pub fn new(module: ModuleKind, error_type: &str) -> Result<Self, TaxonomyError> {
        if error_type == NO_ERROR {
            return Ok(Self::no_error(module));
        }
        if error_type == OTHER {
            return Ok(Self::other(module));
        }
        if let Some(entry) = CATALOG
            .iter()
            .find(|e| e.module == module && e.id == error_type)
        {
            return Ok(Self {
                module,
                error_type: entry.id,
            });
        }
        match CATALOG.iter().find(|e| e.id == error_type) {
            Some(entry) => Err(TaxonomyError::ModuleMismatch {
                module,
                error_type: error_type.to_string(),
                belongs_to: entry.module,
            }),
            None => Err(TaxonomyError::UnknownErrorType(error_type.to_string())),
        }
    }

    pub fn no_error(module: ModuleKind) -> Self {
        Self {
            module,
            error_type: NO_ERROR,
        }
    }

    pub fn other(module: ModuleKind) -> Self {
        Self {
            module,
            error_type: OTHER,
        }
    }

    pub fn is_no_error(&self) -> bool {
        self.error_type == NO_ERROR
    }

    /// Catalog entry, absent for the `no_error` sentinel.
    pub fn entry(&self) -> Option<&'static ErrorType> {
        CATALOG
            .iter()
            .find(|e| e.id == self.error_type && (e.module == self.module || e.id == OTHER))
    }
}

impl fmt::Display for ErrorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.module, self.error_type)
    }
}

/// Lenient module-name parsing for model output.
pub fn parse_module(text: &str) -> Result<ModuleKind, TaxonomyError> {
    let key = normalize_key(text);
    let module = match key.as_str() {
        "memory" => ModuleKind::Memory,
        "reflection" => ModuleKind::Reflection,
        "planning" | "plan" => ModuleKind::Planning,
        "action" => ModuleKind::Action,
        "system" => ModuleKind::System,
        "others" | "other" => ModuleKind::Others,
        _ => return Err(TaxonomyError::UnknownModule(text.to_string())),
    };
    Ok(module)
}

/// Maps raw model output onto the closed catalog.
pub fn parse_error_label(module_text: &str, type_text: &str) -> Result<ErrorLabel, TaxonomyError> {
    let module = parse_module(module_text)?;
    let key = normalize_key(type_text);
    if key.is_empty() {
        return Err(TaxonomyError::UnknownErrorType(type_text.to_string()));
    }
    if key == NO_ERROR {
        return Ok(ErrorLabel::no_error(module));
    }
    let candidates: Vec<&ErrorType> = CATALOG.iter().filter(|e| e.matches_key(&key)).collect();
    if let Some(entry) = candidates.iter().find(|e| e.module == module) {
        return Ok(ErrorLabel {
            module,
            error_type: entry.id,
        });
    }
    if candidates.iter().any(|e| e.id == OTHER) {
        return Ok(ErrorLabel::other(module));
    }
    match candidates.first() {
        Some(entry) => Err(TaxonomyError::ModuleMismatch {
            module,
            error_type: entry.id.to_string(),
            belongs_to: entry.module,
        }),
        None => Err(TaxonomyError::UnknownErrorType(type_text.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefinitionScope {
    All,
    Module(ModuleKind),
}

/// Text block listing error definitions for prompt injection. The `All`
/// scope covers the 17 leaf types; the `others` catch-all is described by
/// the analyzer prompt itself.
pub fn render_error_definitions(scope: DefinitionScope) -> String {
    let modules: Vec<ModuleKind> = match scope {
        DefinitionScope::All => ModuleKind::ALL
            .into_iter()
            .filter(|m| *m != ModuleKind::Others)
            .collect(),
        DefinitionScope::Module(m) => vec![m],
    };
    let mut out = String::from("ERROR DEFINITIONS:\n");
    for module in modules {
        out.push_str(&format!("\n{} ERRORS:\n", module.as_str().to_uppercase()));
        for e in error_types_for(module) {
            out.push_str(&format!("- {} ({}): {}\n", e.id, e.prose_name, e.definition));
        }
    }
    out.push_str(&format!("\nNO ERROR:\n- {NO_ERROR}: {NO_ERROR_DEFINITION}\n"));
    out
}

#[derive(Debug, Serialize)]
struct CatalogRow {
    id: &'static str,
    prose_name: &'static str,
    definition: &'static str,
}

/// Versioned JSON export for external annotation tools.
pub fn catalog_json() -> serde_json::Value {
    let mut modules = serde_json::Map::new();
    for m in ModuleKind::ALL {
        let rows: Vec<CatalogRow> = error_types_for(m)
            .into_iter()
            .map(|e| CatalogRow {
                id: e.id,
                prose_name: e.prose_name,
                definition: e.definition,
            })
            .collect();
        modules.insert(m.as_str().to_string(), serde_json::to_value(rows).unwrap());
    }
    serde_json::json!({
        "version": CATALOG_VERSION,
        "sentinel": NO_ERROR,
        "modules": modules,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_keys() -> Vec<String> {
        let mut keys: Vec<String> = CATALOG
            .iter()
            .flat_map(|e| {
                std::iter::once(e.id)
                    .chain(std::iter::once(e.prose_name))
                    .chain(e.aliases.iter().copied())
            })
            .map(normalize_key)
            .collect();
        keys.push(NO_ERROR.to_string());
        keys
    }

    #[test]
    fn catalog_counts() {
        let leaf: Vec<_> = CATALOG.iter().filter(|e| e.module != ModuleKind::Others).collect();
        assert_eq!(leaf.len(), 17);
        let counts: Vec<usize> = [
            ModuleKind::Memory,
            ModuleKind::Reflection,
            ModuleKind::Planning,
            ModuleKind::Action,
            ModuleKind::System,
        ]
        .into_iter()
        .map(|m| error_types_for(m).len())
        .collect();
        assert_eq!(counts, vec![3, 4, 3, 3, 4]);
        let ids: Vec<_> = error_types_for(ModuleKind::Others).iter().map(|e| e.id).collect();
        assert_eq!(ids, vec!["other"]);
    }

    #[test]
    fn memory_types_in_order() {
        let ids: Vec<_> = error_types_for(ModuleKind::Memory).iter().map(|e| e.id).collect();
        assert_eq!(ids, vec!["over_simplification", "hallucination", "retrieval_failure"]);
    }

    #[test]
    fn module_id_pairs_unique() {
        let mut seen = std::collections::HashSet::new();
        for e in catalog() {
            assert!(seen.insert((e.module, e.id)));
        }
    }

    #[test]
    fn parse_prose_alias() {
        let l = parse_error_label("memory", "Hallucination (False Memory)").unwrap();
        assert_eq!(l, ErrorLabel::new(ModuleKind::Memory, "hallucination").unwrap());
        let l = parse_error_label("Action", "Planning--Action Disconnect").unwrap();
        assert_eq!(l.error_type, "planning_action_disconnect");
        let l = parse_error_label("reflection", "hallucination").unwrap();
        assert_eq!(l.module, ModuleKind::Reflection);
    }

    #[test]
    fn parse_module_mismatch() {
        let err = parse_error_label("planning", "format_error").unwrap_err();
        assert_eq!(
            err,
            TaxonomyError::ModuleMismatch {
                module: ModuleKind::Planning,
                error_type: "format_error".into(),
                belongs_to: ModuleKind::Action,
            }
        );
    }

    #[test]
    fn parse_sentinels() {
        assert!(parse_error_label("action", "no_error").unwrap().is_no_error());
        assert!(parse_error_label("system", "No Error").unwrap().is_no_error());
        assert_eq!(parse_error_label("planning", "other").unwrap(), ErrorLabel::other(ModuleKind::Planning));
        assert_eq!(parse_error_label("others", "other").unwrap().module, ModuleKind::Others);
        assert!(parse_error_label("banana", "other").is_err());
        assert!(matches!(
            parse_error_label("planning", "made_up_error"),
            Err(TaxonomyError::UnknownErrorType(_))
        ));
    }

    #[test]
    fn every_catalog_id_round_trips() {
        for e in catalog() {
            let l = parse_error_label(e.module.as_str(), e.id).unwrap();
            assert_eq!((l.module, l.error_type), (e.module, e.id));
            let l = parse_error_label(e.module.as_str(), e.prose_name).unwrap();
            assert_eq!(l.error_type, e.id);
            let json = serde_json::to_string(&l).unwrap();
            assert_eq!(serde_json::from_str::<ErrorLabel>(&json).unwrap(), l);
        }
    }

    #[test]
    fn strict_label_deserialization() {
        let bad = r#"{"module":"planning","error_type":"format_error"}"#;
        assert!(serde_json::from_str::<ErrorLabel>(bad).is_err());
        let bad = r#"{"module":"planning","error_type":"Inefficient Planning"}"#;
        assert!(serde_json::from_str::<ErrorLabel>(bad).is_err());
    }

    #[test]
    fn render_all_lists_every_definition() {
        let text = render_error_definitions(DefinitionScope::All);
        let entries = text.lines().filter(|l| l.starts_with("- ")).count();
        assert_eq!(entries, 17 + 1);
        for e in catalog().iter().filter(|e| e.module != ModuleKind::Others) {
            assert!(text.contains(e.definition), "{}", e.id);
        }
        assert!(text.contains("- no_error:"));
    }

    #[test]
    fn render_single_module() {
        let text = render_error_definitions(DefinitionScope::Module(ModuleKind::Memory));
        let entries: Vec<_> = text.lines().filter(|l| l.starts_with("- ")).collect();
        assert_eq!(entries.len(), 3 + 1);
        assert!(!text.contains("REFLECTION"));
        assert_eq!(text, render_error_definitions(DefinitionScope::Module(ModuleKind::Memory)));
    }

    #[test]
    fn catalog_json_shape() {
        let v = catalog_json();
        assert_eq!(v["version"], 1);
        assert_eq!(v["modules"]["system"].as_array().unwrap().len(), 4);
        assert_eq!(v["modules"]["memory"][0]["id"], "over_simplification");
    }

    proptest! {
        #[test]
        fn closed_world(module in prop::sample::select(vec!["memory", "reflection", "planning", "action", "system", "others"]),
                        text in "\\PC{0,24}") {
            let keys = all_keys();
            let result = parse_error_label(module, &text);
            if result.is_ok() {
                prop_assert!(keys.contains(&normalize_key(&text)));
            }
            if !keys.contains(&normalize_key(&text)) {
                prop_assert!(result.is_err());
            }
        }

        #[test]
        fn separator_variants_parse(idx in 0usize..17, sep in prop::sample::select(vec![" ", "-", "_", "  ", "--"]), upper in any::<bool>()) {
            let e = &catalog()[idx];
            let mut text = e.id.replace('_', sep);
            if upper { text = text.to_uppercase(); }
            let l = parse_error_label(e.module.as_str(), &text).unwrap();
            prop_assert_eq!(l.error_type, e.id);
        }
    }
}
