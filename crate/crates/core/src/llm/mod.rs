//! Chat-completion gateway.
//!
//! Every model call in the crate goes through [`ChatModel`]. Backends are
//! wrapped in an [`LlmClient`], which meters token usage and enforces an
//! optional token budget. Clients can be forked with [`LlmClient::child`]
//! so one run can be metered (and capped) on its own while still counting
//! toward the parent.

pub mod json;
pub mod live;
pub mod scripted;
pub mod template;

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TokenUsage;
pub use json::{extract_json, extract_json_array, JsonExtractError};
pub use live::{LiveBackend, LiveConfig};
pub use scripted::{Script, ScriptRule, ScriptedBackend};
pub use template::{render_template, PromptTemplate, TemplateError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Single user message at temperature 0.
    pub fn user(model_id: &str, content: impl Into<String>) -> Self {
        Self {
            model_id: model_id.to_string(),
            messages: vec![Message {
                role: Role::User,
                content: content.into(),
            }],
            temperature: 0.0,
            max_output_tokens: None,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    /// All message contents joined by newlines.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
    pub backend: BackendKind,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("script exhausted after {calls} call(s)")]
    ScriptExhausted { calls: u64 },
    #[error("token budget {budget} exceeded ({used} used)")]
    BudgetExceeded { budget: u64, used: u64 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("bad backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] JsonExtractError),
}

pub trait ChatModel: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError>;
}

/// Whitespace-token count; the scripted backend's synthetic usage unit.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Default)]
struct Meter {
    usage: TokenUsage,
    calls: u64,
    budget: Option<u64>,
}

/// A metered client over a backend.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn ChatModel>,
    /// Outermost first; the last entry is this client's own meter.
    meters: Vec<Arc<Mutex<Meter>>>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("usage", &self.usage_report())
            .field("calls", &self.call_count())
            .finish()
    }
}

impl LlmClient {
    pub fn new(backend: impl ChatModel + 'static) -> Self {
        Self::from_arc(Arc::new(backend))
    }

    pub fn from_arc(backend: Arc<dyn ChatModel>) -> Self {
        Self {
            backend,
            meters: vec![Arc::new(Mutex::new(Meter::default()))],
        }
    }

    pub fn scripted(script: Script) -> Self {
        Self::new(ScriptedBackend::new(script))
    }

    /// A client sharing this backend with a fresh meter of its own. Usage
    /// recorded by the child also counts toward every ancestor, and every
    /// ancestor's budget still applies.
    pub fn child(&self) -> Self {
        let mut meters = self.meters.clone();
        meters.push(Arc::new(Mutex::new(Meter::default())));
        Self {
            backend: self.backend.clone(),
            meters,
        }
    }

    fn own(&self) -> std::sync::MutexGuard<'_, Meter> {
        self.meters.last().expect("own meter").lock().expect("meter lock")
    }

    pub fn usage_report(&self) -> TokenUsage {
        self.own().usage
    }

    pub fn call_count(&self) -> u64 {
        self.own().calls
    }

    pub fn reset_usage(&self) {
        let mut m = self.own();
        m.usage = TokenUsage::ZERO;
        m.calls = 0;
    }

    /// Caps this client's total token usage. Once usage reaches the cap no
    /// further calls are made; the call that crosses it is recorded and
    /// reported as [`LlmError::BudgetExceeded`].
    pub fn arm_budget(&self, budget: Option<u64>) {
        self.own().budget = budget;
    }

    fn over_budget(&self) -> Option<LlmError> {
        self.meters.iter().find_map(|m| {
            let m = m.lock().expect("meter lock");
            match m.budget {
                Some(b) if m.usage.total() >= b => Some(LlmError::BudgetExceeded {
                    budget: b,
                    used: m.usage.total(),
                }),
                _ => None,
            }
        })
    }
}

impl ChatModel for LlmClient {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        if request.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if let Some(err) = self.over_budget() {
            return Err(err);
        }
        let completion = self.backend.complete(request)?;
        let mut crossed = None;
        for meter in &self.meters {
            let mut m = meter.lock().expect("meter lock");
            m.usage += completion.usage;
            m.calls += 1;
            if let Some(b) = m.budget {
                if m.usage.total() > b && crossed.is_none() {
                    crossed = Some(LlmError::BudgetExceeded {
                        budget: b,
                        used: m.usage.total(),
                    });
                }
            }
        }
        match crossed {
            Some(err) => Err(err),
            None => Ok(completion),
        }
    }
}

pub const JSON_RETRY_SUFFIX: &str = "Return valid JSON only.";

/// Calls the model and extracts a JSON object, re-prompting with
/// [`JSON_RETRY_SUFFIX`] appended up to `retries` times when extraction
/// fails.
pub fn complete_json(
    client: &dyn ChatModel,
    request: &ChatRequest,
    retries: u32,
) -> Result<(serde_json::Value, Completion), LlmError> {
    complete_with_retry(client, request, retries, extract_json)
}

/// Array flavour of [`complete_json`].
pub fn complete_json_array(
    client: &dyn ChatModel,
    request: &ChatRequest,
    retries: u32,
) -> Result<(Vec<serde_json::Value>, Completion), LlmError> {
    complete_with_retry(client, request, retries, extract_json_array)
}

fn complete_with_retry<T>(
    client: &dyn ChatModel,
    request: &ChatRequest,
    retries: u32,
    extract: fn(&str) -> Result<T, JsonExtractError>,
) -> Result<(T, Completion), LlmError> {
    let mut req = request.clone();
    let mut attempt = 0;
    loop {
        let completion = client.complete(&req)?;
        match extract(&completion.text) {
            Ok(v) => return Ok((v, completion)),
            Err(e) if attempt >= retries => return Err(e.into()),
            Err(_) => {
                attempt += 1;
                let last = req.messages.last_mut().expect("non-empty");
                last.content.push_str("\n\n");
                last.content.push_str(JSON_RETRY_SUFFIX);
            }
        }
    }
}

/// Builds a backend from a kind name and optional script path.
pub fn backend_from_config(
    kind: &str,
    script: Option<&std::path::Path>,
    live: Option<LiveConfig>,
) -> Result<Arc<dyn ChatModel>, LlmError> {
    match kind {
        "scripted" => {
            let path = script.ok_or_else(|| {
                LlmError::Config("scripted backend requires a script path".into())
            })?;
            Ok(Arc::new(ScriptedBackend::from_file(path)?))
        }
        "live" => {
            let cfg = match live {
                Some(cfg) => cfg,
                None => LiveConfig::from_env()?,
            };
            Ok(Arc::new(LiveBackend::new(cfg)))
        }
        other => Err(LlmError::Config(format!("unknown backend `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<(u64, u64)>, Mutex<usize>);

    impl ChatModel for Fixed {
        fn complete(&self, _: &ChatRequest) -> Result<Completion, LlmError> {
            let mut i = self.1.lock().unwrap();
            let (p, c) = self.0[*i % self.0.len()];
            *i += 1;
            Ok(Completion {
                text: "ok".into(),
                usage: TokenUsage::new(p, c),
                backend: BackendKind::Scripted,
            })
        }
    }

    fn req() -> ChatRequest {
        ChatRequest::user("m", "hi")
    }

    #[test]
    fn usage_accumulates_and_resets() {
        let client = LlmClient::new(Fixed(vec![(10, 5), (7, 3)], Mutex::new(0)));
        assert_eq!(client.usage_report().total(), 0);
        client.complete(&req()).unwrap();
        client.complete(&req()).unwrap();
        assert_eq!(client.usage_report().total(), 25);
        assert_eq!(client.call_count(), 2);
        client.reset_usage();
        assert_eq!(client.usage_report(), TokenUsage::ZERO);
    }

    #[test]
    fn budget_crossing_call() {
        let client = LlmClient::new(Fixed(vec![(100, 50)], Mutex::new(0)));
        client.arm_budget(Some(100));
        assert_eq!(
            client.complete(&req()),
            Err(LlmError::BudgetExceeded { budget: 100, used: 150 })
        );
        // nothing further is sent once the cap is reached
        assert!(matches!(client.complete(&req()), Err(LlmError::BudgetExceeded { .. })));
        assert_eq!(client.call_count(), 1);
    }

    #[test]
    fn child_meters_roll_up() {
        let parent = LlmClient::new(Fixed(vec![(2, 1)], Mutex::new(0)));
        let child = parent.child();
        child.complete(&req()).unwrap();
        parent.complete(&req()).unwrap();
        assert_eq!(child.usage_report().total(), 3);
        assert_eq!(parent.usage_report().total(), 6);
        parent.arm_budget(Some(6));
        assert!(matches!(child.complete(&req()), Err(LlmError::BudgetExceeded { .. })));
    }

    #[test]
    fn empty_messages_rejected() {
        let client = LlmClient::new(Fixed(vec![(1, 1)], Mutex::new(0)));
        let mut r = req();
        r.messages.clear();
        assert!(matches!(client.complete(&r), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn json_retry_is_bounded() {
        let script = Script::sequence(["not json", "still not", "{\"ok\": true}"]);
        let client = LlmClient::scripted(script);
        let (v, _) = complete_json(&client, &req(), 2).unwrap();
        assert_eq!(v, serde_json::json!({"ok": true}));
        assert_eq!(client.call_count(), 3);

        let client = LlmClient::scripted(Script::sequence(["nope", "nope", "nope", "{}"]));
        assert!(matches!(
            complete_json(&client, &req(), 2),
            Err(LlmError::Json(JsonExtractError::NoJsonFound))
        ));
        assert_eq!(client.call_count(), 3);
    }

    #[test]
    fn retry_prompt_carries_suffix() {
        let script: Script = serde_json::from_value(serde_json::json!({
            "sequence": ["bad"],
            "rules": [{"when": ["Return valid JSON only."], "responses": ["{\"a\": 1}"]}]
        }))
        .unwrap();
        let client = LlmClient::scripted(script);
        let (v, _) = complete_json(&client, &req(), 1).unwrap();
        assert_eq!(v["a"], 1);
    }
}
