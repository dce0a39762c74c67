use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use paravla_core::eval::DEFAULT_KS;
use paravla_core::pipeline::SplitConfig;
use paravla_core::{PolicyConfig, PretrainConfig, RetryPolicy, TrainConfig};
use serde::{Deserialize, Serialize};

pub const ENV_ENDPOINT: &str = "VLA_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "VLA_LLM_API_KEY";
pub const ENV_MODEL: &str = "VLA_LLM_MODEL";
pub const ENV_TIMEOUT: &str = "VLA_LLM_TIMEOUT_SECS";
pub const ENV_MAX_RETRIES: &str = "VLA_LLM_MAX_RETRIES";
pub const ENV_MAX_PARALLEL: &str = "VLA_LLM_MAX_PARALLEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    /// Chat-completions URL, e.g. `https://api.openai.com/v1/chat/completions`.
    pub endpoint: Option<String>,
    /// Never written back out; normally supplied through the environment.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_parallel: usize,
    /// Attach the three keyframes as inline PNGs.
    pub send_images: bool,
    pub temperature: f64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            endpoint: None,
            api_key: None,
            model: "gpt-4o".into(),
            timeout_secs: 60,
            max_retries: RetryPolicy::default().max_retries,
            max_parallel: 4,
            send_images: true,
            temperature: 0.7,
        }
    }
}

impl LlmSettings {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { max_retries: self.max_retries, ..RetryPolicy::default() }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    /// Overlay `VLA_LLM_*` variables read through `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> anyhow::Result<()> {
        if let Some(v) = get(ENV_ENDPOINT) {
            self.endpoint = Some(v);
        }
        if let Some(v) = get(ENV_API_KEY) {
            self.api_key = Some(v);
        }
        if let Some(v) = get(ENV_MODEL) {
            self.model = v;
        }
        if let Some(v) = get(ENV_TIMEOUT) {
            self.timeout_secs = v.parse().with_context(|| format!("{ENV_TIMEOUT}={v}"))?;
        }
        if let Some(v) = get(ENV_MAX_RETRIES) {
            self.max_retries = v.parse().with_context(|| format!("{ENV_MAX_RETRIES}={v}"))?;
        }
        if let Some(v) = get(ENV_MAX_PARALLEL) {
            self.max_parallel = v.parse().with_context(|| format!("{ENV_MAX_PARALLEL}={v}"))?;
        }
        Ok(())
    }
}

/// Everything a pipeline invocation can be configured with. Command-line
/// flags override the file, and the environment overrides LLM settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Defaults to `<out>/dataset`.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub split: SplitConfig,
    pub policy: PolicyConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub llm: LlmSettings,
    pub ks: Vec<u32>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: PathBuf::from("out"),
            split: SplitConfig::default(),
            policy: PolicyConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            llm: LlmSettings::default(),
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// The file (if any) plus environment overrides.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.llm.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn dataset_root(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("dataset"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: PipelineConfig =
            serde_json::from_str(r#"{"out": "x", "train": {"epochs": 3}, "llm": {"model": "m"}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.rank, TrainConfig::default().rank);
        assert_eq!(cfg.llm.model, "m");
        assert_eq!(cfg.dataset_root(), PathBuf::from("x/dataset"));
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"typo": 1}"#).is_err());
    }

    #[test]
    fn environment_overrides_llm_settings() {
        let env: HashMap<&str, &str> =
            [(ENV_API_KEY, "sk-test"), (ENV_MAX_RETRIES, "7"), (ENV_ENDPOINT, "http://h/v1")].into();
        let mut s = LlmSettings::default();
        s.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(s.api_key.as_deref(), Some("sk-test"));
        assert_eq!(s.retry_policy().max_retries, 7);
        assert_eq!(s.endpoint.as_deref(), Some("http://h/v1"));
        assert!(!serde_json::to_string(&s).unwrap().contains("sk-test"));
        assert!(s.apply_env(|k| (k == ENV_TIMEOUT).then(|| "soon".into())).is_err());
    }
}
