//! Prompt text shipped with the crate.
//!
//! Template files live under `templates/` and are compiled in. Each file
//! holds named sections introduced by a `@@ name` line; every line of a
//! section body keeps its trailing newline. Sections are addressed as
//! `file.section`, e.g. `alfworld.no_his_head`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::llm::template::{PromptTemplate, TemplateError};

const FILES: &[(&str, &str)] = &[
    ("alfworld", include_str!("../templates/alfworld.txt")),
    ("webshop", include_str!("../templates/webshop.txt")),
    ("gaia", include_str!("../templates/gaia.txt")),
    ("judges", include_str!("../templates/judges.txt")),
    ("baselines", include_str!("../templates/baselines.txt")),
    ("toolkit", include_str!("../templates/toolkit.txt")),
];

pub const DETECTOR: &str = "judges.detector";
pub const AGENTDEBUG: &str = "judges.agentdebug";
pub const VANILLA_DEBUG: &str = "baselines.vanilla_debug";
pub const SELF_REFINE: &str = "baselines.self_refine";
pub const TOT_VALUE: &str = "baselines.tot_value";
pub const TOT_PROPOSE: &str = "baselines.tot_propose";
pub const FEEDBACK: &str = "toolkit.feedback";
pub const CORRECTOR: &str = "toolkit.corrector";

/// Splits a template file into `(section, body)` pairs in file order.
pub fn split_sections(text: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        if let Some(name) = line.strip_prefix("@@ ") {
            out.push((name.trim().to_string(), String::new()));
        } else if let Some((_, body)) = out.last_mut() {
            body.push_str(line);
            body.push('\n');
        }
    }
    out
}

fn load() -> Result<BTreeMap<String, PromptTemplate>, TemplateError> {
    let mut map = BTreeMap::new();
    for (file, text) in FILES {
        for (section, body) in split_sections(text) {
            let id = format!("{file}.{section}");
            let t = PromptTemplate::parse(&id, &body)?;
            map.insert(id, t);
        }
    }
    Ok(map)
}

fn registry() -> &'static BTreeMap<String, PromptTemplate> {
    static REGISTRY: OnceLock<BTreeMap<String, PromptTemplate>> = OnceLock::new();
    REGISTRY.get_or_init(|| load().expect("bundled templates parse"))
}

/// A bundled template by id. Panics on an unknown id: ids are constants
/// of this crate, not user input.
pub fn template(id: &str) -> &'static PromptTemplate {
    registry()
        .get(id)
        .unwrap_or_else(|| panic!("no bundled template `{id}`"))
}

pub fn try_template(id: &str) -> Option<&'static PromptTemplate> {
    registry().get(id)
}

pub fn template_ids() -> impl Iterator<Item = &'static str> {
    registry().keys().map(String::as_str)
}

/// Concatenates sections (and raw `{slot}` snippets) into one template.
pub fn compose(id: &str, parts: &[&str]) -> PromptTemplate {
    let body: String = parts
        .iter()
        .map(|p| match try_template(p) {
            Some(t) => t.body.as_str(),
            None => p,
        })
        .collect();
    PromptTemplate::parse(id, &body).expect("composed from parsed sections")
}
