//! Language-model access: free-form completion plus forced-continuation
//! scoring, backed by an OpenAI-compatible HTTP client or by deterministic
//! mocks for offline runs.

mod http;
mod mock;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, RetryPolicy, API_KEY_ENV, DEFAULT_TIMEOUT};
pub use mock::{CategoricalBackend, CategoricalTable, PromptRule, ScriptedBackend, StageProperty};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),

    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },

    #[error("missing credential: set the {0} environment variable")]
    MissingCredential(&'static str),

    #[error("scripted backend exhausted its {0} fixture responses")]
    ScriptExhausted(usize),

    #[error("scoring unsupported by this backend")]
    ScoringUnsupported,

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

impl BackendError {
    /// Transport failures and 5xx responses are worth retrying; 4xx and
    /// configuration problems are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => (500..=599).contains(status),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(
        model: impl Into<String>,
        messages: Vec<ChatMessage>,
    ) -> Result<Self, BackendError> {
        let request = Self {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            want_logprobs: false,
            seed: None,
        };
        request.validate()?;
        Ok(request)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self, BackendError> {
        self.temperature = temperature;
        self.validate()?;
        Ok(self)
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        for m in &self.messages {
            if m.role != Role::Assistant && m.content.trim().is_empty() {
                return Err(BackendError::InvalidRequest(format!(
                    "empty {} message",
                    m.role.as_str()
                )));
            }
        }
        Ok(())
    }

    /// All message contents joined, used by mocks to match prompt rules.
    pub(crate) fn full_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub(crate) fn system_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }

    pub(crate) fn last_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResponse {
    pub text: String,
    /// Per-token log-probabilities of the generated text, when requested and
    /// available. Always ≤ 0.
    pub token_logprobs: Option<Vec<(String, f64)>>,
}

/// One language-model endpoint. Handles are safe for concurrent calls.
pub trait Backend: Send + Sync {
    /// Model identifier, also used in cache keys.
    fn model(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;

    fn supports_scoring(&self) -> bool {
        false
    }

    /// Total log-probability of `continuation` forced token-by-token after
    /// `prompt`. The empty continuation scores 0 (an empty product).
    fn score_continuation(&self, prompt: &str, continuation: &str)
        -> Result<f64, BackendError>;
}

/// Configuration-level choice of backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendKind {
    Http { base_url: String, model: String },
    MockScripted { path: PathBuf },
    MockCategorical { path: PathBuf },
}

impl BackendKind {
    pub fn build(&self) -> Result<Box<dyn Backend>, crate::error::Error> {
        match self {
            BackendKind::Http { base_url, model } => Ok(Box::new(HttpBackend::new(
                base_url,
                model,
                std::env::var(API_KEY_ENV).ok(),
            ))),
            BackendKind::MockScripted { path } => {
                Ok(Box::new(ScriptedBackend::from_file(path)?))
            }
            BackendKind::MockCategorical { path } => {
                Ok(Box::new(CategoricalBackend::from_file(path)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_rejects_out_of_range_temperature() {
        let msgs = vec![ChatMessage::user("hi")];
        assert!(CompletionRequest::new("m", msgs.clone())
            .unwrap()
            .with_temperature(2.5)
            .is_err());
        assert!(CompletionRequest::new("m", msgs)
            .unwrap()
            .with_temperature(1.5)
            .is_ok());
    }

    #[test]
    fn request_rejects_empty_user_content() {
        let msgs = vec![ChatMessage::user("  ")];
        assert!(CompletionRequest::new("m", msgs).is_err());
        assert!(CompletionRequest::new("m", vec![]).is_err());
    }

    #[test]
    fn retryable_classification() {
        assert!(BackendError::Transport("timeout".into()).is_retryable());
        assert!(BackendError::Status {
            status: 503,
            body: String::new()
        }
        .is_retryable());
        assert!(!BackendError::Status {
            status: 401,
            body: String::new()
        }
        .is_retryable());
        assert!(!BackendError::ScoringUnsupported.is_retryable());
    }
}
