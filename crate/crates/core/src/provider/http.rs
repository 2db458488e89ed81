use std::path::PathBuf;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CompletionRequest, CompletionResult, Part, Provider, Role, Usage};
use crate::error::{Error, Result};

/// Settings for an OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_token_env")]
    pub auth_token_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_token_env() -> String {
    "HWFORGE_API_KEY".into()
}

fn default_timeout() -> u64 {
    120
}

pub struct HttpProvider {
    config: HttpConfig,
    token: Option<String>,
    attachment_root: Option<PathBuf>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(config: HttpConfig, attachment_root: Option<PathBuf>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::ConfigInvalid(format!("http client: {e}")))?;
        let token = std::env::var(&config.auth_token_env).ok();
        Ok(HttpProvider { config, token, attachment_root, client })
    }

    fn image_url(&self, path: &str) -> String {
        let Some(root) = &self.attachment_root else {
            return path.to_string();
        };
        match std::fs::read(root.join(path)) {
            Ok(bytes) => {
                let mime = if path.ends_with(".jpg") || path.ends_with(".jpeg") { "image/jpeg" } else { "image/png" };
                format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes))
            }
            Err(_) => path.to_string(),
        }
    }

    fn body(&self, request: &CompletionRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                let content: Vec<Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        Part::Text(t) => json!({"type": "text", "text": t}),
                        Part::ImageRef(path) => json!({"type": "image_url", "image_url": {"url": self.image_url(path)}}),
                    })
                    .collect();
                json!({"role": role, "content": content})
            })
            .collect();
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
        })
    }
}

impl Provider for HttpProvider {
    fn id(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut call = self.client.post(&url).json(&self.body(request));
        if let Some(token) = &self.token {
            call = call.bearer_auth(token);
        }
        let remote = |last: String| Error::RemoteFailure { attempts: 1, last };
        let response = call.send().map_err(|e| remote(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(remote(format!("{status}: {}", text.chars().take(500).collect::<String>())));
        }
        let payload: Value = response.json().map_err(|e| remote(format!("bad response body: {e}")))?;
        let choice = &payload["choices"][0];
        let text = choice["message"]["content"]
            .as_str()
            .ok_or_else(|| remote("response lacks choices[0].message.content".into()))?
            .to_string();
        let completion_chars = text.chars().count();
        if choice["finish_reason"] == "length" || completion_chars > request.max_output_chars {
            return Err(Error::OutputTruncated { limit: request.max_output_chars });
        }
        Ok(CompletionResult {
            text,
            usage: Usage {
                prompt_chars: request.render().chars().count() as u64,
                completion_chars: completion_chars as u64,
            },
            provider_id: format!("http:{}", self.config.model),
            transcript_entry: None,
        })
    }
}
