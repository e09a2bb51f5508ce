//! OpenAI-compatible HTTP backend.
//!
//! Completions go over `POST <base_url>/v1/chat/completions`. Forced
//! continuations cannot be scored through the chat endpoint, so scoring —
//! when enabled — uses the legacy `POST <base_url>/v1/completions` with
//! `echo` + `logprobs` and sums the token log-probabilities that fall inside
//! the continuation. Servers without that endpoint leave scoring
//! unsupported and the evaluation falls back to sampling-based metrics.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ChatMessage, CompletionRequest, CompletionResponse};

/// Environment variable holding the bearer credential.
pub const API_KEY_ENV: &str = "STRATSAMPLE_API_KEY";

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

pub struct HttpBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    scoring_enabled: bool,
}

impl HttpBackend {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>) -> Self {
        Self::with_timeout(base_url, model, api_key, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("default TLS backend available");
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            client,
            retry: RetryPolicy::default(),
            scoring_enabled: false,
        }
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Enables forced-continuation scoring through `/v1/completions`.
    pub fn with_scoring(mut self, enabled: bool) -> Self {
        self.scoring_enabled = enabled;
        self
    }

    fn api_key(&self) -> Result<&str, BackendError> {
        self.api_key
            .as_deref()
            .filter(|k| !k.is_empty())
            .ok_or(BackendError::MissingCredential(API_KEY_ENV))
    }

    fn post_json<B: Serialize>(&self, url: &str, body: &B) -> Result<String, BackendError> {
        let key = self.api_key()?;
        let mut attempt = 0;
        loop {
            let outcome = self
                .client
                .post(url)
                .bearer_auth(key)
                .json(body)
                .send()
                .map_err(|e| BackendError::Transport(e.to_string()))
                .and_then(|response| {
                    let status = response.status().as_u16();
                    let text = response
                        .text()
                        .map_err(|e| BackendError::Transport(e.to_string()))?;
                    if (200..300).contains(&status) {
                        Ok(text)
                    } else {
                        Err(BackendError::Status { status, body: text })
                    }
                });
            match outcome {
                Ok(text) => return Ok(text),
                Err(err) if err.is_retryable() && attempt < self.retry.max_retries => {
                    std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}

#[derive(Serialize)]
struct ChatCompletionBody<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

impl<'a> ChatCompletionBody<'a> {
    fn from_request(request: &'a CompletionRequest) -> Self {
        Self {
            model: &request.model,
            messages: request
                .messages
                .iter()
                .map(|m: &ChatMessage| WireMessage {
                    role: m.role.as_str(),
                    content: &m.content,
                })
                .collect(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            logprobs: request.want_logprobs,
            seed: request.seed,
        }
    }
}

#[derive(Deserialize)]
struct ChatCompletionReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReplyMessage,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatLogprobs {
    #[serde(default)]
    content: Option<Vec<ChatTokenLogprob>>,
}

#[derive(Deserialize)]
struct ChatTokenLogprob {
    token: String,
    logprob: f64,
}

#[derive(Serialize)]
struct EchoCompletionBody<'a> {
    model: &'a str,
    prompt: String,
    max_tokens: u32,
    echo: bool,
    logprobs: u32,
}

#[derive(Deserialize)]
struct EchoCompletionReply {
    choices: Vec<EchoChoice>,
}

#[derive(Deserialize)]
struct EchoChoice {
    logprobs: Option<EchoLogprobs>,
}

#[derive(Deserialize)]
struct EchoLogprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

impl Backend for HttpBackend {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let url = format!("{}/v1/chat/completions", self.base_url);
        let body = ChatCompletionBody::from_request(request);
        let text = self.post_json(&url, &body)?;
        let reply: ChatCompletionReply = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let choice = reply
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("no choices".into()))?;
        let content = choice
            .message
            .content
            .ok_or_else(|| BackendError::MalformedResponse("choice has no content".into()))?;
        let token_logprobs = choice.logprobs.and_then(|lp| lp.content).map(|tokens| {
            tokens
                .into_iter()
                .map(|t| (t.token, t.logprob.min(0.0)))
                .collect()
        });
        Ok(CompletionResponse {
            text: content,
            token_logprobs,
        })
    }

    fn supports_scoring(&self) -> bool {
        self.scoring_enabled
    }

    fn score_continuation(
        &self,
        prompt: &str,
        continuation: &str,
    ) -> Result<f64, BackendError> {
        if !self.scoring_enabled {
            return Err(BackendError::ScoringUnsupported);
        }
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let url = format!("{}/v1/completions", self.base_url);
        let body = EchoCompletionBody {
            model: &self.model,
            prompt: format!("{prompt}{continuation}"),
            max_tokens: 0,
            echo: true,
            logprobs: 0,
        };
        let text = self.post_json(&url, &body)?;
        let reply: EchoCompletionReply = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let logprobs = reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| BackendError::MalformedResponse("no echoed logprobs".into()))?;
        if logprobs.token_logprobs.len() != logprobs.text_offset.len() {
            return Err(BackendError::MalformedResponse(
                "token_logprobs and text_offset lengths differ".into(),
            ));
        }
        let boundary = prompt.len();
        let total = logprobs
            .token_logprobs
            .iter()
            .zip(&logprobs.text_offset)
            .filter(|(_, &offset)| offset >= boundary)
            .filter_map(|(lp, _)| *lp)
            .map(|lp| lp.min(0.0))
            .sum();
        Ok(total)
    }
}
