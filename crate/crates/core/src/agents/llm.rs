//! Generic chat-completion HTTP client.

use std::collections::BTreeMap;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub text: String,
    /// Per-token probabilities, when the backend returns log-probabilities.
    pub token_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("chat request failed: {0}")]
    Transport(String),
    #[error("chat response had no text choice: {0}")]
    NoChoice(String),
}

#[async_trait]
pub trait ChatModel: Send + Sync {
    async fn complete(&self, messages: &[ChatMessage]) -> Result<ChatReply, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    /// Environment variable holding a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub request_logprobs: bool,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    logprobs: bool,
}

/// POSTs `{model, messages, temperature}` and reads the first choice's
/// `message.content` (or `text`).
pub struct ChatClient {
    cfg: LlmConfig,
    http: reqwest::Client,
}

impl ChatClient {
    pub fn new(cfg: LlmConfig) -> Result<Self, LlmError> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self { cfg, http })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.cfg
    }
}

/// Extracts the first text choice and any token log-probabilities from an
/// OpenAI-style response body.
pub fn parse_chat_response(body: &serde_json::Value) -> Result<ChatReply, LlmError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| LlmError::NoChoice(body.to_string()))?;
    let text = choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(|t| t.as_str())
        .ok_or_else(|| LlmError::NoChoice(body.to_string()))?
        .to_string();
    let token_probs = choice
        .pointer("/logprobs/content")
        .and_then(|c| c.as_array())
        .map(|tokens| {
            tokens
                .iter()
                .filter_map(|t| t.get("logprob").and_then(|l| l.as_f64()))
                .map(f64::exp)
                .collect::<Vec<_>>()
        })
        .filter(|v| !v.is_empty());
    Ok(ChatReply { text, token_probs })
}

#[async_trait]
impl ChatModel for ChatClient {
    async fn complete(&self, messages: &[ChatMessage]) -> Result<ChatReply, LlmError> {
        let mut req = self.http.post(&self.cfg.endpoint).json(&ChatRequest {
            model: &self.cfg.model,
            messages,
            temperature: self.cfg.temperature,
            logprobs: self.cfg.request_logprobs,
        });
        for (k, v) in &self.cfg.headers {
            req = req.header(k, v);
        }
        if let Some(var) = &self.cfg.api_key_env {
            if let Ok(key) = std::env::var(var) {
                req = req.bearer_auth(key);
            }
        }
        let body: serde_json::Value = req
            .send()
            .await
            .and_then(|r| r.error_for_status())
            .map_err(|e| LlmError::Transport(e.to_string()))?
            .json()
            .await
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        parse_chat_response(&body)
    }
}

/// Replies with canned text; for tests and offline runs.
#[derive(Debug, Clone)]
pub struct CannedChat {
    pub reply: String,
    pub token_probs: Option<Vec<f64>>,
}

impl CannedChat {
    pub fn new(reply: impl Into<String>) -> Self {
        Self {
            reply: reply.into(),
            token_probs: None,
        }
    }
}

#[async_trait]
impl ChatModel for CannedChat {
    async fn complete(&self, _messages: &[ChatMessage]) -> Result<ChatReply, LlmError> {
        Ok(ChatReply {
            text: self.reply.clone(),
            token_probs: self.token_probs.clone(),
        })
    }
}
