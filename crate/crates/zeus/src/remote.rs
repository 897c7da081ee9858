//! Chat-completions HTTP backend.

use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use zeus_core::instruct::{BackendKind, LlmBackend, LlmRequest, SYSTEM_ROLE};
use zeus_core::Error;

use crate::config::BackendConfig;

pub const ENV_URL: &str = "ZEUS_LLM_URL";
pub const ENV_KEY: &str = "ZEUS_LLM_KEY";
pub const ENV_MODEL: &str = "ZEUS_LLM_MODEL";
const ENDPOINT: &str = "/v1/chat/completions";

/// Talks to any OpenAI-compatible server with greedy decoding.
#[derive(Debug)]
pub struct RemoteBackend {
    pub endpoint: String,
    pub model: String,
    api_key: Option<String>,
    pub max_attempts: u32,
    pub base_delay: Duration,
    agent: ureq::Agent,
}

enum Failure {
    /// Worth another attempt (transport error, 429, 5xx, empty reply).
    Transient(String),
    Fatal(String),
}

impl RemoteBackend {
    /// Builds from config, with `ZEUS_LLM_*` environment variables taking precedence.
    pub fn from_config(cfg: &BackendConfig) -> Self {
        let url = std::env::var(ENV_URL).unwrap_or_else(|_| cfg.url.clone());
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| cfg.model.clone());
        let key = std::env::var(ENV_KEY).ok().filter(|k| !k.is_empty());
        Self::new(&url, &model, key, cfg)
    }

    pub fn new(url: &str, model: &str, api_key: Option<String>, cfg: &BackendConfig) -> Self {
        let base = url.trim_end_matches('/');
        let endpoint = if base.ends_with(ENDPOINT) { base.to_string() } else { format!("{base}{ENDPOINT}") };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint,
            model: model.to_string(),
            api_key,
            max_attempts: cfg.max_attempts.max(1),
            base_delay: Duration::from_millis(cfg.base_delay_ms),
            agent,
        }
    }

    pub fn request_body(&self, request: &LlmRequest) -> Value {
        json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": SYSTEM_ROLE},
                {"role": "user", "content": request.user_message()},
            ],
        })
    }

    fn attempt(&self, body: &Value) -> Result<String, Failure> {
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Failure::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Failure::Transient(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Failure::Transient(format!("HTTP {status}: {text}")));
        }
        if status != 200 {
            return Err(Failure::Fatal(format!("HTTP {status}: {text}")));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| Failure::Fatal(format!("invalid JSON: {e}")))?;
        let content = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| Failure::Fatal("response has no choices[0].message.content".into()))?;
        if content.trim().is_empty() {
            return Err(Failure::Transient("empty completion".into()));
        }
        Ok(content.to_string())
    }
}

impl LlmBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn generate(&self, request: &LlmRequest) -> zeus_core::Result<String> {
        let body = self.request_body(request);
        let mut delay = self.base_delay;
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(message)) => return Err(Error::Backend { attempts: attempt, message }),
                Err(Failure::Transient(message)) => last = message,
            }
            if attempt < self.max_attempts {
                thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(Error::Backend { attempts: self.max_attempts, message: last })
    }
}
