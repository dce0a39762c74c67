//! Chat-completions client for OpenAI-compatible endpoints.

use std::path::{Path, PathBuf};

use base64::Engine;
use paravla_core::instruction::{LlmClient, PromptBundle, TransportError};
use serde_json::{json, Value};

use crate::config::LlmSettings;

pub struct HttpLlm {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    model: String,
    temperature: f64,
    /// Keyframes are read from here when images are sent.
    dataset_root: Option<PathBuf>,
}

impl HttpLlm {
    /// `dataset_root` enables inline keyframe images.
    pub fn new(settings: &LlmSettings, dataset_root: Option<&Path>) -> anyhow::Result<Self> {
        let endpoint = settings.endpoint.clone().ok_or_else(|| {
            anyhow::anyhow!("no LLM endpoint configured; set {} or use --mock", crate::config::ENV_ENDPOINT)
        })?;
        let client = reqwest::blocking::Client::builder().timeout(settings.timeout()).build()?;
        Ok(Self {
            client,
            endpoint,
            api_key: settings.api_key.clone(),
            model: settings.model.clone(),
            temperature: settings.temperature,
            dataset_root: dataset_root.filter(|_| settings.send_images).map(Path::to_path_buf),
        })
    }

    fn body(&self, prompt: &PromptBundle) -> Result<Value, TransportError> {
        let mut content = vec![json!({ "type": "text", "text": prompt.user_message })];
        if let Some(root) = &self.dataset_root {
            for kf in &prompt.keyframes {
                let path = root.join(&kf.image_ref);
                let bytes = std::fs::read(&path)
                    .map_err(|e| TransportError::fatal(format!("reading {}: {e}", path.display())))?;
                let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
                content.push(
                    json!({ "type": "image_url", "image_url": { "url": format!("data:image/png;base64,{b64}") } }),
                );
            }
        }
        Ok(json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                { "role": "system", "content": prompt.system_message },
                { "role": "user", "content": content },
            ],
        }))
    }
}

impl LlmClient for HttpLlm {
    fn complete(&self, prompt: &PromptBundle) -> Result<String, TransportError> {
        let mut req = self.client.post(&self.endpoint).json(&self.body(prompt)?);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::timeout(e.to_string())
            } else {
                TransportError::connection(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(TransportError::http(status.as_u16(), text.chars().take(300).collect::<String>()));
        }
        let v: Value = resp.json().map_err(|e| TransportError::fatal(format!("response is not json: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| TransportError::fatal("response has no choices[0].message.content"))
    }
}
