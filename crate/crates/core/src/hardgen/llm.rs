//! Chat-completion access: a minimal HTTP client for OpenAI-compatible
//! endpoints plus a replay client that serves canned responses from a
//! fixture file, so the whole generation pipeline runs offline in tests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("http error: {0}")]
    Http(String),
    #[error("response carried no message content: {0}")]
    MissingContent(String),
    #[error("replay fixtures exhausted after {0} responses")]
    Exhausted(usize),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".to_string(),
            content: content.into(),
        }
    }
}

pub trait ChatCompletion: Send {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, LlmError>;
}

/// Live client for a chat-completions endpoint. The API key comes from an
/// environment variable, never from config files.
pub struct HttpChatClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_retries: usize,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, key_env: &str) -> Self {
        HttpChatClient {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var(key_env).ok(),
            max_retries: 3,
        }
    }
}

impl ChatCompletion for HttpChatClient {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
        });
        let mut last_err = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(250 << attempt));
            }
            let mut request = ureq::post(&self.endpoint).set("content-type", "application/json");
            if let Some(key) = &self.api_key {
                request = request.set("authorization", &format!("Bearer {key}"));
            }
            match request.send_json(body.clone()) {
                Ok(response) => {
                    let value: serde_json::Value = response
                        .into_json()
                        .map_err(|e| LlmError::Http(e.to_string()))?;
                    return value
                        .pointer("/choices/0/message/content")
                        .and_then(|c| c.as_str())
                        .map(|s| s.to_string())
                        .ok_or_else(|| LlmError::MissingContent(value.to_string()));
                }
                Err(ureq::Error::Status(code, response)) if code >= 500 => {
                    last_err = format!(
                        "status {code}: {}",
                        response.into_string().unwrap_or_default()
                    );
                }
                Err(err) => return Err(LlmError::Http(err.to_string())),
            }
        }
        Err(LlmError::Http(format!(
            "gave up after {} retries: {last_err}",
            self.max_retries
        )))
    }
}

/// Serves responses in order from a JSON array of strings. One response is
/// consumed per call, which makes fixture-driven runs exactly reproducible.
pub struct ReplayChatClient {
    responses: Vec<String>,
    cursor: usize,
}

impl ReplayChatClient {
    pub fn new(responses: Vec<String>) -> Self {
        ReplayChatClient {
            responses,
            cursor: 0,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
        let responses: Vec<String> =
            serde_json::from_str(&raw).map_err(|e| LlmError::Io(e.to_string()))?;
        Ok(Self::new(responses))
    }

    pub fn remaining(&self) -> usize {
        self.responses.len() - self.cursor
    }
}

impl ChatCompletion for ReplayChatClient {
    fn complete(&mut self, _messages: &[ChatMessage]) -> Result<String, LlmError> {
        let response = self
            .responses
            .get(self.cursor)
            .cloned()
            .ok_or(LlmError::Exhausted(self.responses.len()))?;
        self.cursor += 1;
        Ok(response)
    }
}
