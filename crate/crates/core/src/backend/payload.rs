//! Chat-completions logprobs wire shape.
//!
//! ```json
//! {"content": [{"token": "Hi", "logprob": -0.01, "bytes": [72, 105],
//!               "top_logprobs": [{"token": "Hi", "logprob": -0.01}, ...]}]}
//! ```
//!
//! The same shape is used to export simulated streams.

use serde_json::{json, Map, Value};
use thiserror::Error;

use super::{BackendError, Usage};
use crate::metrics::{clamp_logprob, Alternative, TokenObservation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("missing field `{0}`")]
    Missing(String),
    #[error("field `{path}` should be {expected}")]
    WrongType {
        path: String,
        expected: &'static str,
    },
    #[error("bad value at `{path}`: {message}")]
    Data { path: String, message: String },
}

fn field<'a>(obj: &'a Value, key: &str, path: &str) -> Result<&'a Value, ParseError> {
    match obj.get(key) {
        Some(v) if !v.is_null() => Ok(v),
        _ => Err(ParseError::Missing(join(path, key))),
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, ParseError> {
    v.as_array().ok_or_else(|| ParseError::WrongType {
        path: path.to_string(),
        expected: "an array",
    })
}

fn as_str<'a>(v: &'a Value, path: &str) -> Result<&'a str, ParseError> {
    v.as_str().ok_or_else(|| ParseError::WrongType {
        path: path.to_string(),
        expected: "a string",
    })
}

fn logprob_at(obj: &Value, path: &str) -> Result<f64, ParseError> {
    let p = join(path, "logprob");
    let raw = field(obj, "logprob", path)?
        .as_f64()
        .ok_or_else(|| ParseError::WrongType {
            path: p.clone(),
            expected: "a number",
        })?;
    clamp_logprob(raw).map_err(|e| ParseError::Data {
        path: p,
        message: e.to_string(),
    })
}

/// Parse a `logprobs` object into token observations.
///
/// Positions are assigned from 0 in document order. Alternatives are sorted
/// by descending logprob (stable, so equal entries keep upstream order).
pub fn parse_logprob_payload(doc: &Value) -> Result<Vec<TokenObservation>, ParseError> {
    let content = as_array(field(doc, "content", "")?, "content")?;
    let mut tokens = Vec::with_capacity(content.len());
    for (i, item) in content.iter().enumerate() {
        let path = format!("content[{i}]");
        let text = as_str(field(item, "token", &path)?, &join(&path, "token"))?.to_string();
        let logprob = logprob_at(item, &path)?;
        let mut alternatives = Vec::new();
        if let Some(top) = item.get("top_logprobs").filter(|v| !v.is_null()) {
            let top_path = join(&path, "top_logprobs");
            for (j, alt) in as_array(top, &top_path)?.iter().enumerate() {
                let alt_path = format!("{top_path}[{j}]");
                let alt_text = as_str(field(alt, "token", &alt_path)?, &join(&alt_path, "token"))?;
                alternatives.push(Alternative::new(alt_text, logprob_at(alt, &alt_path)?));
            }
        }
        alternatives.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        tokens.push(TokenObservation {
            position: i,
            text,
            logprob,
            alternatives,
        });
    }
    Ok(tokens)
}

/// Inverse of [`parse_logprob_payload`].
pub fn to_logprob_payload(tokens: &[TokenObservation]) -> Value {
    let content: Vec<Value> = tokens
        .iter()
        .map(|t| {
            let top: Vec<Value> = t
                .alternatives
                .iter()
                .map(|a| json!({"token": a.text, "logprob": a.logprob}))
                .collect();
            let mut m = Map::new();
            m.insert("token".into(), json!(t.text));
            m.insert("logprob".into(), json!(t.logprob));
            m.insert("top_logprobs".into(), Value::Array(top));
            Value::Object(m)
        })
        .collect();
    json!({ "content": content })
}

/// Pieces extracted from a full chat-completions response body.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCompletion {
    pub text: String,
    pub tokens: Vec<TokenObservation>,
    pub usage: Usage,
}

pub fn parse_chat_completion(body: &Value) -> Result<ParsedCompletion, BackendError> {
    let choices = as_array(field(body, "choices", "")?, "choices")?;
    let choice = choices
        .first()
        .ok_or_else(|| ParseError::Missing("choices[0]".into()))?;
    let text = match choice.get("message").and_then(|m| m.get("content")) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(_) => {
            return Err(ParseError::WrongType {
                path: "choices[0].message.content".into(),
                expected: "a string",
            }
            .into())
        }
    };
    let logprobs = match choice.get("logprobs") {
        Some(v) if !v.is_null() => v,
        _ if text.is_empty() => return Err(BackendError::EmptyCompletion),
        _ => return Err(BackendError::LogprobsUnavailable),
    };
    if logprobs.get("content").is_none_or(Value::is_null) {
        return Err(BackendError::LogprobsUnavailable);
    }
    let tokens = parse_logprob_payload(logprobs)?;
    if tokens.is_empty() || text.is_empty() {
        return Err(BackendError::EmptyCompletion);
    }
    let usage = body.get("usage").filter(|u| !u.is_null());
    let count = |key: &str| usage.and_then(|u| u.get(key)).and_then(Value::as_u64);
    Ok(ParsedCompletion {
        usage: Usage {
            prompt_tokens: count("prompt_tokens").unwrap_or(0),
            completion_tokens: count("completion_tokens").unwrap_or(tokens.len() as u64),
        },
        text,
        tokens,
    })
}
