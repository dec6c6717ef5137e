//! Deterministic backend that replays canned responses.
//!
//! Responses are looked up by request fingerprint: pass index plus the hash of
//! the concatenated message contents. Fixture entries may instead key on the
//! original query text, or on the pass index alone; the most specific match
//! wins.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    prompt_hash, Backend, BackendError, Fingerprint, GenerationRequest, GenerationResult, Usage,
};
use crate::metrics::{Alternative, TokenObservation};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ScriptedOutcome {
    Respond {
        result: GenerationResult,
    },
    /// Simulates an upstream failure that survived all retries.
    Fail {
        status: u16,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    pub pass_index: u32,
    /// Exact prompt hash; see [`GenerationRequest::prompt_hash`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    /// Matches any request whose first user message equals this text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(flatten)]
    pub outcome: ScriptedOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedScenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub responses: Vec<ScriptedResponse>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported scenario schema version {0}")]
    SchemaVersion(u32),
    #[error("scenario {scenario:?} response #{index}: {source}")]
    InvalidResponse {
        scenario: String,
        index: usize,
        #[source]
        source: BackendError,
    },
    #[error("scenario {scenario:?} has two responses for the same key (response #{index})")]
    DuplicateKey { scenario: String, index: usize },
}

impl ScriptedScenario {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            name: name.into(),
            description: description.into(),
            responses: Vec::new(),
        }
    }

    pub fn respond_any(mut self, pass_index: u32, result: GenerationResult) -> Self {
        self.responses.push(ScriptedResponse {
            pass_index,
            prompt_hash: None,
            query: None,
            outcome: ScriptedOutcome::Respond { result },
        });
        self
    }

    pub fn respond_to_query(
        mut self,
        pass_index: u32,
        query: impl Into<String>,
        result: GenerationResult,
    ) -> Self {
        self.responses.push(ScriptedResponse {
            pass_index,
            prompt_hash: None,
            query: Some(query.into()),
            outcome: ScriptedOutcome::Respond { result },
        });
        self
    }

    pub fn fail_any(mut self, pass_index: u32, status: u16, message: impl Into<String>) -> Self {
        self.responses.push(ScriptedResponse {
            pass_index,
            prompt_hash: None,
            query: None,
            outcome: ScriptedOutcome::Fail {
                status,
                message: message.into(),
            },
        });
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(ScenarioError::SchemaVersion(self.schema_version));
        }
        let mut seen = std::collections::HashSet::new();
        for (index, r) in self.responses.iter().enumerate() {
            if !seen.insert(Key::of(r)) {
                return Err(ScenarioError::DuplicateKey {
                    scenario: self.name.clone(),
                    index,
                });
            }
            if let ScriptedOutcome::Respond { result } = &r.outcome {
                result
                    .check_invariants()
                    .map_err(|source| ScenarioError::InvalidResponse {
                        scenario: self.name.clone(),
                        index,
                        source,
                    })?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Key {
    Hash(u32, String),
    Query(u32, String),
    Any(u32),
}

impl Key {
    fn of(r: &ScriptedResponse) -> Self {
        match (&r.prompt_hash, &r.query) {
            (Some(h), _) => Key::Hash(r.pass_index, h.clone()),
            (None, Some(q)) => Key::Query(r.pass_index, prompt_hash([q.as_str()])),
            (None, None) => Key::Any(r.pass_index),
        }
    }
}

pub struct ScriptedBackend {
    scenario_name: String,
    table: HashMap<Key, ScriptedOutcome>,
    calls: AtomicUsize,
    log: Mutex<Vec<Fingerprint>>,
}

impl ScriptedBackend {
    pub fn new(scenario: ScriptedScenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let table = scenario
            .responses
            .into_iter()
            .map(|r| (Key::of(&r), r.outcome))
            .collect();
        Ok(Self {
            scenario_name: scenario.name,
            table,
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Fingerprints of every request received, in arrival order.
    pub fn calls(&self) -> Vec<Fingerprint> {
        self.log.lock().expect("call log poisoned").clone()
    }

    fn lookup(&self, request: &GenerationRequest) -> Option<&ScriptedOutcome> {
        let pass = request.pass_index;
        self.table
            .get(&Key::Hash(pass, request.prompt_hash()))
            .or_else(|| {
                request
                    .query()
                    .and_then(|q| self.table.get(&Key::Query(pass, prompt_hash([q]))))
            })
            .or_else(|| self.table.get(&Key::Any(pass)))
    }
}

impl Backend for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fingerprint = request.fingerprint();
        self.log
            .lock()
            .expect("call log poisoned")
            .push(fingerprint.clone());
        match self.lookup(request) {
            Some(ScriptedOutcome::Respond { result }) => Ok(result.clone()),
            Some(ScriptedOutcome::Fail { status, message }) => Err(BackendError::Upstream {
                status: *status,
                body: message.clone(),
                attempts: 1,
            }),
            None => Err(BackendError::Unscripted(fingerprint)),
        }
    }

    fn name(&self) -> &str {
        &self.scenario_name
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Assembles a token stream for fixtures. Alternatives are kept sorted.
#[derive(Debug, Default, Clone)]
pub struct StreamBuilder {
    tokens: Vec<TokenObservation>,
}

impl StreamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a token chosen with probability `p`, plus the listed alternatives.
    pub fn token(mut self, text: &str, p: f64, others: &[(&str, f64)]) -> Self {
        let mut alternatives = vec![Alternative::new(text, p.ln())];
        alternatives.extend(others.iter().map(|&(t, q)| Alternative::new(t, q.ln())));
        alternatives.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        self.tokens.push(TokenObservation {
            position: self.tokens.len(),
            text: text.to_string(),
            logprob: p.ln(),
            alternatives,
        });
        self
    }

    /// Adds a token chosen with probability `p`; the remaining mass is split
    /// over `k - 1` filler alternatives in fixed proportions.
    pub fn spread(self, text: &str, p: f64, k: usize) -> Self {
        const SPLIT: [f64; 4] = [0.5, 0.25, 0.15, 0.10];
        const FILLERS: [&str; 5] = [" the", " a", " it", " this", " an"];
        let rest = (1.0 - p).max(0.0);
        let names: Vec<&str> = FILLERS.iter().copied().filter(|f| *f != text).collect();
        let others: Vec<(&str, f64)> = (0..k.saturating_sub(1).min(SPLIT.len()))
            .filter(|_| rest > 0.0)
            .map(|i| (names[i], rest * SPLIT[i]))
            .collect();
        self.token(text, p, &others)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn finish(
        self,
        prompt_tokens: u64,
        wall_time_ms: f64,
        extraction_ms: f64,
    ) -> GenerationResult {
        let text = self.tokens.iter().map(|t| t.text.as_str()).collect();
        GenerationResult {
            text,
            usage: Usage {
                prompt_tokens,
                completion_tokens: self.tokens.len() as u64,
            },
            tokens: self.tokens,
            wall_time_ms,
            extraction_ms,
            attempts: 1,
        }
    }
}
