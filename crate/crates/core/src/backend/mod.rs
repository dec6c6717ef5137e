//! Generation backends that return text together with token logprobs.

mod openai;
mod payload;
mod retry;
pub mod scripted;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::TokenObservation;

pub use openai::{OpenAiBackend, OpenAiConfig};
pub use payload::{parse_chat_completion, parse_logprob_payload, to_logprob_payload, ParseError};
pub use retry::RetryPolicy;
pub use scripted::{ScriptedBackend, ScriptedScenario};

pub const DEFAULT_TOP_K: usize = 5;
pub const MAX_TOP_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    /// Alternatives requested per position (1..=20).
    pub top_k: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub model_id: String,
    pub seed: Option<u64>,
    /// 0 for the draft, 1 for the refinement pass. Never sent upstream.
    pub pass_index: u32,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest(
                "messages must not be empty".into(),
            ));
        }
        if !(1..=MAX_TOP_K).contains(&self.top_k) {
            return Err(BackendError::InvalidRequest(format!(
                "top_k must be in 1..={MAX_TOP_K}, got {}",
                self.top_k
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Stable hash of the concatenated message contents.
    pub fn prompt_hash(&self) -> String {
        prompt_hash(self.messages.iter().map(|m| m.content.as_str()))
    }

    /// Content of the first user message, i.e. the original query.
    pub fn query(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            pass_index: self.pass_index,
            prompt_hash: self.prompt_hash(),
        }
    }
}

/// First 16 hex digits of SHA-256 over the parts, each terminated by 0x1F.
pub fn prompt_hash<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0x1f]);
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    pub pass_index: u32,
    pub prompt_hash: String,
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "pass {} / {}", self.pass_index, self.prompt_hash)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Equals the concatenation of the token texts.
    pub text: String,
    pub tokens: Vec<TokenObservation>,
    pub usage: Usage,
    /// Whole call, including logprob extraction.
    pub wall_time_ms: f64,
    /// Portion of `wall_time_ms` spent parsing logprobs.
    pub extraction_ms: f64,
    pub attempts: u32,
}

impl GenerationResult {
    pub fn check_invariants(&self) -> Result<(), BackendError> {
        if self.tokens.is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        let joined: String = self.tokens.iter().map(|t| t.text.as_str()).collect();
        if joined != self.text {
            return Err(BackendError::Inconsistent(
                "token texts do not concatenate to the completion text".into(),
            ));
        }
        if self.usage.completion_tokens != self.tokens.len() as u64 {
            return Err(BackendError::Inconsistent(format!(
                "usage reports {} completion tokens but {} were returned",
                self.usage.completion_tokens,
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("upstream returned HTTP {status} after {attempts} attempt(s): {body}")]
    Upstream {
        status: u16,
        body: String,
        attempts: u32,
    },
    #[error("logprobs unavailable in upstream response")]
    LogprobsUnavailable,
    #[error("empty completion")]
    EmptyCompletion,
    #[error("unscripted request ({0})")]
    Unscripted(Fingerprint),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("inconsistent response: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

impl BackendError {
    /// Transport failures and 5xx / 429 responses are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport { .. } => true,
            BackendError::Upstream { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }

    pub fn attempts(&self) -> Option<u32> {
        match self {
            BackendError::Transport { attempts, .. } | BackendError::Upstream { attempts, .. } => {
                Some(*attempts)
            }
            _ => None,
        }
    }

    pub(crate) fn with_attempts(mut self, n: u32) -> Self {
        match &mut self {
            BackendError::Transport { attempts, .. } | BackendError::Upstream { attempts, .. } => {
                *attempts = n
            }
            _ => {}
        }
        self
    }
}

/// A model endpoint that exposes per-token logprobs.
///
/// Implementations are shared across threads; each call is independent.
pub trait Backend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    fn name(&self) -> &str;

    /// Whether wall-clock timings from this backend are real measurements.
    fn is_deterministic(&self) -> bool {
        false
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}
