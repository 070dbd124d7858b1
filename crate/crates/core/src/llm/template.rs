//! `{placeholder}` templates with strict binding checks.
//!
//! `{name}` is a slot, `{{` and `}}` are literal braces. Any other brace is
//! a syntax error, caught when the template is parsed rather than when it
//! is rendered.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}`: missing binding for `{name}`")]
    MissingPlaceholder { template: String, name: String },
    #[error("template `{template}`: binding `{name}` has no slot")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}`: bad brace at byte {offset}")]
    Syntax { template: String, offset: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
    pieces: Vec<Piece>,
}

fn is_slot_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl PromptTemplate {
    pub fn parse(id: &str, body: &str) -> Result<Self, TemplateError> {
        let syntax = |offset| TemplateError::Syntax {
            template: id.to_string(),
            offset,
        };
        let mut pieces = Vec::new();
        let mut text = String::new();
        let bytes = body.as_bytes();
        let mut i = 0;
        while i < body.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    text.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    text.push('}');
                    i += 2;
                }
                b'{' => {
                    let close = body[i + 1..].find('}').ok_or_else(|| syntax(i))?;
                    let name = &body[i + 1..i + 1 + close];
                    if !is_slot_name(name) {
                        return Err(syntax(i));
                    }
                    if !text.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    pieces.push(Piece::Slot(name.to_string()));
                    i += close + 2;
                }
                b'}' => return Err(syntax(i)),
                _ => {
                    let ch = body[i..].chars().next().expect("in bounds");
                    text.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        let required_placeholders = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(name) => Some(name.clone()),
                Piece::Text(_) => None,
            })
            .collect();
        Ok(Self {
            id: id.to_string(),
            body: body.to_string(),
            required_placeholders,
            pieces,
        })
    }

    /// Fills every slot. Bindings must match the slot set exactly.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        if let Some(name) = self
            .required_placeholders
            .iter()
            .find(|n| !bindings.contains_key(n.as_str()))
        {
            return Err(TemplateError::MissingPlaceholder {
                template: self.id.clone(),
                name: name.clone(),
            });
        }
        if let Some(name) = bindings
            .keys()
            .find(|n| !self.required_placeholders.contains(**n))
        {
            return Err(TemplateError::UnknownPlaceholder {
                template: self.id.clone(),
                name: name.to_string(),
            });
        }
        let mut out = String::with_capacity(self.body.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => out.push_str(&bindings[name.as_str()]),
            }
        }
        Ok(out)
    }
}

/// Convenience for building a binding map from pairs.
pub fn bindings<const N: usize>(pairs: [(&'static str, String); N]) -> BTreeMap<&'static str, String> {
    pairs.into_iter().collect()
}

pub fn render_template(
    template: &PromptTemplate,
    bindings: &BTreeMap<&str, String>,
) -> Result<String, TemplateError> {
    template.render(bindings)
}
