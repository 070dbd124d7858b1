//! OpenAI-compatible `/chat/completions` backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendKind, ChatModel, ChatRequest, Completion, LlmError};
use crate::model::TokenUsage;

pub const ENV_API_BASE: &str = "TRAJDEBUG_API_BASE";
pub const ENV_API_KEY: &str = "TRAJDEBUG_API_KEY";
pub const ENV_MODEL: &str = "TRAJDEBUG_MODEL";
const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub api_base: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}

impl LiveConfig {
    pub fn new(api_base: &str, api_key: Option<String>) -> Self {
        Self {
            api_base: api_base.trim_end_matches('/').to_string(),
            api_key,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
        }
    }

    /// Endpoint from `TRAJDEBUG_API_BASE`, key from `TRAJDEBUG_API_KEY`
    /// falling back to `OPENAI_API_KEY`.
    pub fn from_env() -> Result<Self, LlmError> {
        let base = std::env::var(ENV_API_BASE).unwrap_or_else(|_| DEFAULT_API_BASE.into());
        let key = std::env::var(ENV_API_KEY)
            .or_else(|_| std::env::var("OPENAI_API_KEY"))
            .ok();
        Ok(Self::new(&base, key))
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn body(request: &ChatRequest) -> Value {
        let mut body = json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        if let Some(max) = request.max_output_tokens {
            body["max_tokens"] = json!(max);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn send_once(&self, body: &Value) -> Result<Value, Attempt> {
        let url = format!("{}/chat/completions", self.config.api_base);
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| Attempt::Fatal(format!("bad response body: {e}")))
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

fn parse_response(v: &Value) -> Result<(String, TokenUsage), String> {
    let text = v["choices"][0]["message"]["content"]
        .as_str()
        .ok_or("response has no choices[0].message.content")?
        .to_string();
    let usage = TokenUsage::new(
        v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    );
    Ok((text, usage))
}

impl ChatModel for LiveBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let body = Self::body(request);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let err = match self.send_once(&body) {
                Ok(v) => {
                    let (text, usage) = parse_response(&v).map_err(|message| {
                        LlmError::Transport { attempts, message }
                    })?;
                    return Ok(Completion {
                        text,
                        usage,
                        backend: BackendKind::Live,
                    });
                }
                Err(Attempt::Fatal(message)) => return Err(LlmError::Transport { attempts, message }),
                Err(Attempt::Retry(message)) => message,
            };
            if attempts > self.config.max_retries {
                return Err(LlmError::Transport {
                    attempts,
                    message: err,
                });
            }
            let backoff = self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(6));
            std::thread::sleep(Duration::from_millis(backoff));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves the given (status, body) pairs in order, one per connection,
    /// and hands back the request bodies it saw.
    fn mock(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn ok_body(text: &str) -> String {
        json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3}
        })
        .to_string()
    }

    fn backend(base: &str, retries: u32) -> LiveBackend {
        let mut cfg = LiveConfig::new(base, Some("k".into()));
        cfg.max_retries = retries;
        cfg.backoff_ms = 1;
        cfg.timeout_secs = 5;
        LiveBackend::new(cfg)
    }

    #[test]
    fn retries_transient_then_succeeds() {
        let (base, handle) = mock(vec![(503, "{}".into()), (429, "{}".into()), (200, ok_body("hello"))]);
        let c = backend(&base, 3)
            .complete(&ChatRequest::user("gpt-test", "ping").with_seed(Some(4)))
            .unwrap();
        assert_eq!(c.text, "hello");
        assert_eq!(c.usage, TokenUsage::new(12, 3));
        assert_eq!(c.backend, BackendKind::Live);
        let seen = handle.join().unwrap();
        assert_eq!(seen.len(), 3);
        let body: Value = serde_json::from_str(&seen[2]).unwrap();
        assert_eq!(body["model"], "gpt-test");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["seed"], 4);
        assert_eq!(body["messages"][0]["role"], "user");
    }

    #[test]
    fn gives_up_after_retries() {
        let (base, handle) = mock(vec![(500, "{}".into()), (500, "{}".into())]);
        let err = backend(&base, 1)
            .complete(&ChatRequest::user("m", "ping"))
            .unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 2, .. }), "{err:?}");
        handle.join().unwrap();
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (base, handle) = mock(vec![(401, "{\"error\": \"bad key\"}".into())]);
        let err = backend(&base, 3)
            .complete(&ChatRequest::user("m", "ping"))
            .unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 1, .. }));
        handle.join().unwrap();
    }
}
