//! The HTTP client against a throwaway local server speaking just enough
//! HTTP/1.1 to serve canned chat-completions responses.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};
use uncertainty_loop::backend::{OpenAiBackend, OpenAiConfig, RetryPolicy};
use uncertainty_loop::{Backend, BackendError, GenerationRequest, Message};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: Value,
}

struct Server {
    base_url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
    handle: Option<JoinHandle<()>>,
}

impl Server {
    /// Serves `replies` (status, body) in order, one per connection.
    fn start(replies: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        let handle = std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut length = 0usize;
                let mut authorization = None;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (name, value) = line.split_once(':').unwrap();
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => length = value.trim().parse().unwrap(),
                        "authorization" => authorization = Some(value.trim().to_string()),
                        _ => {}
                    }
                }
                let mut raw = vec![0u8; length];
                reader.read_exact(&mut raw).unwrap();
                log.lock().unwrap().push(Seen {
                    path: request_line
                        .split_whitespace()
                        .nth(1)
                        .unwrap_or_default()
                        .to_string(),
                    authorization,
                    body: serde_json::from_slice(&raw).unwrap(),
                });
                let mut stream = stream;
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
                stream.flush().unwrap();
            }
        });
        Self {
            base_url,
            seen,
            handle: Some(handle),
        }
    }

    fn backend(&self) -> OpenAiBackend {
        OpenAiBackend::new(OpenAiConfig {
            base_url: self.base_url.clone(),
            api_key: Some("sk-local".into()),
            timeout: Duration::from_secs(10),
            retry: RetryPolicy::no_delay(3),
        })
        .unwrap()
    }

    fn finish(mut self) -> Vec<Seen> {
        self.handle.take().unwrap().join().unwrap();
        self.seen.lock().unwrap().clone()
    }
}

fn request() -> GenerationRequest {
    GenerationRequest {
        messages: vec![Message::user("Say hi")],
        top_k: 3,
        max_tokens: 16,
        temperature: 0.0,
        model_id: "local-model".into(),
        seed: Some(11),
        pass_index: 0,
    }
}

fn ok_body() -> String {
    json!({
        "id": "cmpl-1",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": "Hello there"},
            "logprobs": {"content": [
                {"token": "Hello", "logprob": -0.02, "top_logprobs": [
                    {"token": "Hi", "logprob": -4.1}, {"token": "Hello", "logprob": -0.02}, {"token": "Hey", "logprob": -5.0}]},
                {"token": " there", "logprob": -0.7, "top_logprobs": [
                    {"token": " there", "logprob": -0.7}, {"token": "!", "logprob": -0.9}, {"token": ",", "logprob": -3.0}]}
            ]},
            "finish_reason": "stop"
        }],
        "usage": {"prompt_tokens": 8, "completion_tokens": 2, "total_tokens": 10}
    })
    .to_string()
}

#[test]
fn server_error_then_success() {
    let server = Server::start(vec![(500, r#"{"error":"boom"}"#.into()), (200, ok_body())]);
    let result = server.backend().generate(&request()).unwrap();
    let seen = server.finish();
    assert_eq!(result.attempts, 2);
    assert_eq!(result.text, "Hello there");
    assert_eq!(
        result
            .tokens
            .iter()
            .map(|t| t.text.as_str())
            .collect::<String>(),
        result.text
    );
    assert_eq!(result.tokens[0].alternatives[0].text, "Hello");
    assert_eq!(
        (result.usage.prompt_tokens, result.usage.completion_tokens),
        (8, 2)
    );
    assert!(result.wall_time_ms >= result.extraction_ms);

    assert_eq!(seen.len(), 2);
    let s = &seen[1];
    assert_eq!(s.path, "/v1/chat/completions");
    assert_eq!(s.authorization.as_deref(), Some("Bearer sk-local"));
    assert_eq!(s.body["logprobs"], json!(true));
    assert_eq!(s.body["top_logprobs"], json!(3));
    assert_eq!(s.body["model"], json!("local-model"));
    assert_eq!(s.body["seed"], json!(11));
    assert_eq!(
        s.body["messages"],
        json!([{"role": "user", "content": "Say hi"}])
    );
}

#[test]
fn rate_limit_is_retried() {
    let server = Server::start(vec![(429, "{}".into()), (200, ok_body())]);
    assert_eq!(server.backend().generate(&request()).unwrap().attempts, 2);
    server.finish();
}

#[test]
fn persistent_failure_reports_attempts() {
    let server = Server::start(vec![
        (503, "a".into()),
        (502, "b".into()),
        (500, "c".into()),
    ]);
    let err = server.backend().generate(&request()).unwrap_err();
    server.finish();
    assert!(
        matches!(
            err,
            BackendError::Upstream {
                status: 500,
                attempts: 3,
                ..
            }
        ),
        "{err:?}"
    );
}

#[test]
fn client_errors_are_not_retried() {
    let server = Server::start(vec![(400, r#"{"error":"bad request"}"#.into())]);
    let err = server.backend().generate(&request()).unwrap_err();
    assert_eq!(server.finish().len(), 1);
    assert!(matches!(
        err,
        BackendError::Upstream {
            status: 400,
            attempts: 1,
            ..
        }
    ));
}

#[test]
fn missing_logprobs_is_permanent() {
    let body =
        json!({"choices": [{"message": {"role": "assistant", "content": "Hello"}}]}).to_string();
    let server = Server::start(vec![(200, body)]);
    let err = server.backend().generate(&request()).unwrap_err();
    assert_eq!(server.finish().len(), 1);
    assert_eq!(err, BackendError::LogprobsUnavailable);
}

#[test]
fn empty_completion_is_an_error() {
    let body = json!({"choices": [{"message": {"role": "assistant", "content": ""}, "logprobs": {"content": []}}]})
        .to_string();
    let server = Server::start(vec![(200, body)]);
    assert_eq!(
        server.backend().generate(&request()).unwrap_err(),
        BackendError::EmptyCompletion
    );
    server.finish();
}

#[test]
fn mismatched_tokens_are_rejected() {
    let body = ok_body().replace("Hello there", "Hello world");
    let server = Server::start(vec![(200, body)]);
    assert!(matches!(
        server.backend().generate(&request()).unwrap_err(),
        BackendError::Inconsistent(_)
    ));
    server.finish();
}

#[test]
fn connection_refused_is_transport_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let backend = OpenAiBackend::new(OpenAiConfig {
        base_url: format!("http://127.0.0.1:{port}/v1"),
        api_key: None,
        timeout: Duration::from_secs(2),
        retry: RetryPolicy::no_delay(2),
    })
    .unwrap();
    let err = backend.generate(&request()).unwrap_err();
    assert!(
        matches!(err, BackendError::Transport { attempts: 2, .. }),
        "{err:?}"
    );
}

#[test]
fn invalid_requests_never_hit_the_wire() {
    let backend = OpenAiBackend::new(OpenAiConfig {
        base_url: "http://127.0.0.1:9/v1".into(),
        ..OpenAiConfig::default()
    })
    .unwrap();
    let mut r = request();
    r.top_k = 0;
    assert!(matches!(
        backend.generate(&r),
        Err(BackendError::InvalidRequest(_))
    ));
    let mut r = request();
    r.messages.clear();
    assert!(matches!(
        backend.generate(&r),
        Err(BackendError::InvalidRequest(_))
    ));
}
