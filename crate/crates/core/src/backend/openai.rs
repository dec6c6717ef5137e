//! OpenAI-compatible `/chat/completions` client with logprobs enabled.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{
    parse_chat_completion, Backend, BackendError, GenerationRequest, GenerationResult, RetryPolicy,
};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    /// Up to and including the version segment, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.to_string(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                message: e.to_string(),
                attempts: 0,
            })?;
        let endpoint = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
        Ok(Self {
            config,
            endpoint,
            client,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn request_body(request: &GenerationRequest) -> Value {
        let mut body = json!({
            "model": request.model_id,
            "messages": request.messages,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "logprobs": true,
            "top_logprobs": request.top_k,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn send_once(&self, body: &Value, attempt: u32) -> Result<Value, BackendError> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let transport = |e: reqwest::Error| BackendError::Transport {
            message: e.to_string(),
            attempts: attempt,
        };
        let resp = req.send().map_err(transport)?;
        let status = resp.status();
        let text = resp.text().map_err(transport)?;
        if !status.is_success() {
            return Err(BackendError::Upstream {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
                attempts: attempt,
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Transport {
            message: format!("malformed response body: {e}"),
            attempts: attempt,
        })
    }
}

impl Backend for OpenAiBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let started = Instant::now();
        let body = Self::request_body(request);
        let (response, attempts) = self.config.retry.run(|n| self.send_once(&body, n))?;

        let parse_started = Instant::now();
        let parsed = parse_chat_completion(&response)?;
        let extraction_ms = parse_started.elapsed().as_secs_f64() * 1e3;

        let result = GenerationResult {
            text: parsed.text,
            tokens: parsed.tokens,
            usage: parsed.usage,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            extraction_ms,
            attempts,
        };
        result.check_invariants()?;
        Ok(result)
    }

    fn name(&self) -> &str {
        "openai-compatible"
    }
}
