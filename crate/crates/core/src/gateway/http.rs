use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::json;

use super::{GatewayError, ModelConfig, Provider, ProviderError};

/// OpenAI-compatible chat-completions client.
///
/// Credentials come from `PROMPTSCI_<PROVIDER>_API_KEY`; the endpoint from
/// `PROMPTSCI_<PROVIDER>_BASE_URL`, defaulting to the OpenAI API for the
/// `openai` provider.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: String,
}

fn env_prefix(provider: &str) -> String {
    let upper: String = provider
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("PROMPTSCI_{upper}")
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Invalid(e.to_string()))?;
        Ok(Self {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
        })
    }

    pub fn from_env(provider: &str) -> Result<Self, GatewayError> {
        let prefix = env_prefix(provider);
        let key_var = format!("{prefix}_API_KEY");
        let api_key = std::env::var(&key_var).map_err(|_| GatewayError::MissingCredentials(key_var))?;
        let base_url = match std::env::var(format!("{prefix}_BASE_URL")) {
            Ok(url) => url,
            Err(_) if provider == "openai" => "https://api.openai.com/v1".to_string(),
            Err(_) => return Err(GatewayError::MissingCredentials(format!("{prefix}_BASE_URL"))),
        };
        Self::new(base_url, api_key, Duration::from_secs(60))
    }
}

impl Provider for HttpProvider {
    fn complete(&self, config: &ModelConfig, prompt: &str) -> Result<String, ProviderError> {
        let mut body = json!({
            "model": config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": config.temperature,
            "max_tokens": config.max_output_tokens,
        });
        if let Some(seed) = config.seed {
            body["seed"] = json!(seed);
        }
        let resp = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(ProviderError::Fatal(format!("HTTP {status}: {text}")));
        }
        let value: serde_json::Value = resp.json().map_err(|e| ProviderError::Transient(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Fatal("response carries no message content".into()))
    }
}

/// Dispatches each request to an [`HttpProvider`] built from the
/// environment for the config's provider id, created on first use.
#[derive(Default)]
pub struct EnvProviders {
    clients: Mutex<HashMap<String, Arc<HttpProvider>>>,
}

impl EnvProviders {
    pub fn new() -> Self {
        Self::default()
    }

    fn client(&self, provider: &str) -> Result<Arc<HttpProvider>, GatewayError> {
        let mut clients = self.clients.lock().expect("provider cache poisoned");
        if let Some(c) = clients.get(provider) {
            return Ok(c.clone());
        }
        let c = Arc::new(HttpProvider::from_env(provider)?);
        clients.insert(provider.to_string(), c.clone());
        Ok(c)
    }
}

impl Provider for EnvProviders {
    fn complete(&self, config: &ModelConfig, prompt: &str) -> Result<String, ProviderError> {
        self.client(&config.provider)
            .map_err(|e| ProviderError::Fatal(e.to_string()))?
            .complete(config, prompt)
    }
}
