//! OpenAI-compatible chat-completions client.

use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde_json::{json, Value};

use super::{BackendConfig, GatewayError, ModelBackend};

const SYSTEM_MESSAGE: &str =
    "You are an advertisement compliance agent. Follow the role instructions and the output format exactly.";

/// Counting semaphore capping in-flight requests per backend.
struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock();
        while *n == 0 {
            self.freed.wait(&mut n);
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock() += 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteBackend {
    config: BackendConfig,
    url: String,
    client: reqwest::blocking::Client,
    gate: Semaphore,
    name: String,
}

impl RemoteBackend {
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let base = config.endpoint_url.clone().unwrap_or_default();
        let url = format!("{}/chat/completions", base.trim_end_matches('/'));
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let name = format!("remote({})", config.model_name.as_deref().unwrap_or(""));
        Ok(RemoteBackend {
            gate: Semaphore::new(config.max_concurrency),
            config,
            url,
            client,
            name,
        })
    }

    fn body(&self, prompt: &str) -> Value {
        let mut body = json!({
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": SYSTEM_MESSAGE},
                {"role": "user", "content": prompt},
            ],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        if let Some(seed) = self.config.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

impl ModelBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn max_retries(&self) -> u32 {
        self.config.max_retries
    }

    fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        let key = std::env::var(&self.config.auth_env_var)
            .map_err(|_| GatewayError::MissingAuth(self.config.auth_env_var.clone()))?;
        let _permit = self.gate.acquire();
        let response = self
            .client
            .post(&self.url)
            .bearer_auth(key)
            .json(&self.body(prompt))
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    GatewayError::Timeout(Duration::from_secs(self.config.timeout_secs))
                } else {
                    GatewayError::Transport(e.to_string())
                }
            })?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(GatewayError::Http {
                status: status.as_u16(),
                body: body.chars().take(500).collect(),
            });
        }
        let value: Value = response
            .json()
            .map_err(|e| GatewayError::Transport(format!("response is not JSON: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Transport("response has no choices[0].message.content".into()))
    }
}
