//! Deterministic playback backend.
//!
//! A script has two parts. `rules` are tried first, in order: a rule fires
//! when every `when` substring occurs in the prompt and no `unless`
//! substring does, and it answers with its `responses` in turn (repeating
//! the last one once they run out, unless `repeat_last` is false). If no
//! rule fires, the next entry of `sequence` is returned, and once that
//! runs out the `fallback`, if any. Matching runs on
//! whitespace-normalized text, so line wrapping in a prompt does not
//! matter.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{whitespace_tokens, BackendKind, ChatModel, ChatRequest, Completion, LlmError};
use crate::model::{normalize_whitespace, TokenUsage};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(default)]
    pub when: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unless: Vec<String>,
    pub responses: Vec<String>,
    #[serde(default = "default_true")]
    pub repeat_last: bool,
}

impl ScriptRule {
    pub fn new<I, S>(when: I, response: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            when: when.into_iter().map(Into::into).collect(),
            unless: Vec::new(),
            responses: vec![response.into()],
            repeat_last: true,
        }
    }

    pub fn unless<I, S>(mut self, unless: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.unless = unless.into_iter().map(Into::into).collect();
        self
    }

    pub fn responses<I, S>(mut self, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.responses = responses.into_iter().map(Into::into).collect();
        self
    }

    fn matches(&self, prompt: &str) -> bool {
        self.when
            .iter()
            .all(|w| prompt.contains(&normalize_whitespace(w)))
            && !self
                .unless
                .iter()
                .any(|u| prompt.contains(&normalize_whitespace(u)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub sequence: Vec<String>,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl Script {
    pub fn sequence<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            sequence: items.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    /// Answers every prompt no rule claims with `response`.
    pub fn constant(response: impl Into<String>) -> Self {
        Self {
            fallback: Some(response.into()),
            ..Self::default()
        }
    }

    pub fn with_rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    /// Appends another script's rules and sequence after this one's.
    pub fn merge(mut self, other: Script) -> Self {
        self.rules.extend(other.rules);
        self.sequence.extend(other.sequence);
        self.fallback = self.fallback.or(other.fallback);
        self
    }

    /// Accepts either a bare JSON array (a sequence) or a full script object.
    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| LlmError::Config(format!("script: {e}")))?;
        if value.is_array() {
            let sequence = serde_json::from_value(value)
                .map_err(|e| LlmError::Config(format!("script: {e}")))?;
            return Ok(Script {
                sequence,
                ..Script::default()
            });
        }
        serde_json::from_value(value).map_err(|e| LlmError::Config(format!("script: {e}")))
    }
}

#[derive(Debug, Default)]
struct Cursor {
    sequence: usize,
    rules: Vec<usize>,
    calls: u64,
}

#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    cursor: Mutex<Cursor>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let rules = vec![0; script.rules.len()];
        Self {
            script,
            cursor: Mutex::new(Cursor {
                rules,
                ..Cursor::default()
            }),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(Script::from_json(&text)?))
    }

    fn next_response(&self, prompt: &str) -> Result<String, LlmError> {
        // One lock for the whole lookup keeps playback order well defined
        // under concurrent callers.
        let mut cur = self.cursor.lock().expect("script lock");
        cur.calls += 1;
        for (i, rule) in self.script.rules.iter().enumerate() {
            if !rule.matches(prompt) || rule.responses.is_empty() {
                continue;
            }
            let pos = cur.rules[i];
            if pos < rule.responses.len() {
                cur.rules[i] += 1;
                return Ok(rule.responses[pos].clone());
            }
            if rule.repeat_last {
                return Ok(rule.responses.last().expect("non-empty").clone());
            }
        }
        let pos = cur.sequence;
        match self.script.sequence.get(pos) {
            Some(text) => {
                cur.sequence += 1;
                Ok(text.clone())
            }
            None => match &self.script.fallback {
                Some(text) => Ok(text.clone()),
                None => Err(LlmError::ScriptExhausted { calls: cur.calls - 1 }),
            },
        }
    }
}

impl ChatModel for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let raw = request.prompt_text();
        let prompt = normalize_whitespace(&raw);
        let text = self.next_response(&prompt)?;
        let usage = TokenUsage::new(whitespace_tokens(&raw), whitespace_tokens(&text));
        Ok(Completion {
            text,
            usage,
            backend: BackendKind::Scripted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::LlmClient;

    fn ask(client: &LlmClient, prompt: &str) -> Result<String, LlmError> {
        client
            .complete(&ChatRequest::user("m", prompt))
            .map(|c| c.text)
    }

    #[test]
    fn playback_then_exhausted() {
        let client = LlmClient::scripted(Script::sequence(["A", "B"]));
        assert_eq!(ask(&client, "x").unwrap(), "A");
        assert_eq!(ask(&client, "x").unwrap(), "B");
        assert_eq!(ask(&client, "x"), Err(LlmError::ScriptExhausted { calls: 2 }));
    }

    #[test]
    fn rules_before_sequence() {
        let script = Script::sequence(["seq"])
            .with_rule(ScriptRule::new(["needle"], "r1").responses(["r1", "r2"]))
            .with_rule(ScriptRule::new(["hay"], "h").unless(["skip"]));
        let client = LlmClient::scripted(script);
        assert_eq!(ask(&client, "a needle here").unwrap(), "r1");
        assert_eq!(ask(&client, "a needle here").unwrap(), "r2");
        assert_eq!(ask(&client, "a needle here").unwrap(), "r2");
        assert_eq!(ask(&client, "hay skip").unwrap(), "seq");
        assert_eq!(ask(&client, "hay").unwrap(), "h");
    }

    #[test]
    fn exhausted_rule_falls_through() {
        let mut rule = ScriptRule::new(["k"], "once");
        rule.repeat_last = false;
        let client = LlmClient::scripted(Script::sequence(["fallback"]).with_rule(rule));
        assert_eq!(ask(&client, "k").unwrap(), "once");
        assert_eq!(ask(&client, "k").unwrap(), "fallback");
    }

    #[test]
    fn whitespace_insensitive_matching() {
        let client = LlmClient::scripted(
            Script::default().with_rule(ScriptRule::new(["current   observation is:\nx"], "hit")),
        );
        assert_eq!(ask(&client, "your current observation\n  is: x y").unwrap(), "hit");
    }

    #[test]
    fn synthetic_usage() {
        let client = LlmClient::scripted(Script::sequence(["one two three"]));
        let c = client.complete(&ChatRequest::user("m", "a b  c d")).unwrap();
        assert_eq!(c.usage, TokenUsage::new(4, 3));
        assert_eq!(c.backend, BackendKind::Scripted);
    }

    #[test]
    fn deterministic_replay() {
        let script = Script::sequence(["a", "b c"]).with_rule(ScriptRule::new(["z"], "zz"));
        let run = || {
            let client = LlmClient::scripted(script.clone());
            let outs: Vec<_> = ["z", "q", "z", "q"].iter().map(|p| ask(&client, p).unwrap()).collect();
            (outs, client.usage_report())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn script_file_forms() {
        assert_eq!(Script::from_json("[\"a\"]").unwrap(), Script::sequence(["a"]));
        let s = Script::from_json(r#"{"rules": [{"when": ["x"], "responses": ["y"]}]}"#).unwrap();
        assert_eq!(s.rules.len(), 1);
        assert!(s.rules[0].repeat_last);
        assert!(Script::from_json(r#"{"rulez": []}"#).is_err());
    }
}
