//! Layered configuration: defaults < config file < environment < flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uncertainty_loop::backend::{OpenAiConfig, RetryPolicy};
use uncertainty_loop::orchestrator::{ConfigError as LoopConfigError, LoopConfig};

pub const ENV_BASE_URL: &str = "ULOOP_BASE_URL";
pub const ENV_API_KEY: &str = "ULOOP_API_KEY";
pub const ENV_OPENAI_API_KEY: &str = "OPENAI_API_KEY";
pub const ENV_MODEL: &str = "ULOOP_MODEL";
pub const ENV_TOP_K: &str = "ULOOP_TOP_K";
pub const ENV_THRESHOLD_PERPLEXITY: &str = "ULOOP_THRESHOLD_PERPLEXITY";
pub const ENV_THRESHOLD_ENTROPY: &str = "ULOOP_THRESHOLD_ENTROPY";
pub const ENV_THRESHOLD_COUNT: &str = "ULOOP_THRESHOLD_COUNT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("environment variable {name}={value:?} is not a valid {expected}")]
    Env {
        name: &'static str,
        value: String,
        expected: &'static str,
    },
    #[error(transparent)]
    Invalid(#[from] LoopConfigError),
    #[error("parallelism must be at least 1")]
    Parallelism,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSettings {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_attempts: u32,
}

impl Default for BackendSettings {
    fn default() -> Self {
        let d = OpenAiConfig::default();
        Self {
            base_url: d.base_url,
            api_key: None,
            timeout_secs: d.timeout.as_secs(),
            max_attempts: d.retry.max_attempts,
        }
    }
}

impl BackendSettings {
    pub fn openai_config(&self) -> OpenAiConfig {
        OpenAiConfig {
            base_url: self.base_url.clone(),
            api_key: self.api_key.clone(),
            timeout: std::time::Duration::from_secs(self.timeout_secs),
            retry: RetryPolicy {
                max_attempts: self.max_attempts,
                ..RetryPolicy::default()
            },
        }
    }
}

/// On-disk TOML layout. Loop settings sit at the top level with
/// `[trigger]`, `[report]`, `[cost_model]` and `[generation]` sections;
/// connection details live under `[backend]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    #[serde(flatten)]
    pub run: LoopConfig,
    pub backend: BackendSettings,
    pub parallelism: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Values supplied on the command line. `None` / `false` means "not given".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlagOverrides {
    pub no_refine: bool,
    pub no_alternatives: bool,
    pub no_context: bool,
    pub threshold_perplexity: Option<f64>,
    pub threshold_entropy: Option<f64>,
    pub threshold_count: Option<usize>,
    pub top_k: Option<usize>,
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub run: LoopConfig,
    pub backend: BackendSettings,
    pub parallelism: usize,
}

fn env_parse<T: std::str::FromStr>(
    env: &dyn Fn(&str) -> Option<String>,
    name: &'static str,
    expected: &'static str,
) -> Result<Option<T>, ConfigError> {
    match env(name) {
        None => Ok(None),
        Some(v) => v.trim().parse().map(Some).map_err(|_| ConfigError::Env {
            name,
            value: v,
            expected,
        }),
    }
}

/// Merges the layers and validates the result.
pub fn resolve(
    file: Option<FileConfig>,
    env: &dyn Fn(&str) -> Option<String>,
    flags: &FlagOverrides,
) -> Result<Settings, ConfigError> {
    let file = file.unwrap_or_default();
    let mut run = file.run;
    let mut backend = file.backend;
    let mut parallelism = file.parallelism.unwrap_or(1);

    if let Some(v) = env(ENV_BASE_URL) {
        backend.base_url = v;
    }
    if let Some(v) = env(ENV_API_KEY).or_else(|| env(ENV_OPENAI_API_KEY)) {
        backend.api_key = Some(v);
    }
    if let Some(v) = env(ENV_MODEL) {
        run.generation.model_id = v;
    }
    if let Some(v) = env_parse(env, ENV_TOP_K, "integer")? {
        run.generation.top_k = v;
    }
    if let Some(v) = env_parse(env, ENV_THRESHOLD_PERPLEXITY, "number")? {
        run.trigger.perplexity_threshold = v;
    }
    if let Some(v) = env_parse(env, ENV_THRESHOLD_ENTROPY, "number")? {
        run.trigger.max_entropy_threshold = v;
    }
    if let Some(v) = env_parse(env, ENV_THRESHOLD_COUNT, "integer")? {
        run.trigger.low_conf_min_count = v;
    }

    if flags.no_refine {
        run.refinement_enabled = false;
    }
    if flags.no_alternatives {
        run.include_alternatives_in_report = false;
    }
    if flags.no_context {
        run.include_context_in_report = false;
    }
    if let Some(v) = flags.threshold_perplexity {
        run.trigger.perplexity_threshold = v;
    }
    if let Some(v) = flags.threshold_entropy {
        run.trigger.max_entropy_threshold = v;
    }
    if let Some(v) = flags.threshold_count {
        run.trigger.low_conf_min_count = v;
    }
    if let Some(v) = flags.top_k {
        run.generation.top_k = v;
    }
    if let Some(v) = &flags.model {
        run.generation.model_id = v.clone();
    }
    if let Some(v) = flags.seed {
        run.generation.seed = Some(v);
    }
    if let Some(v) = flags.parallelism {
        parallelism = v;
    }

    run.validate()?;
    if parallelism == 0 {
        return Err(ConfigError::Parallelism);
    }
    Ok(Settings {
        run,
        backend,
        parallelism,
    })
}
