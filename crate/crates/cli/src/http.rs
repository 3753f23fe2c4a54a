//! OpenAI-compatible HTTP provider for embeddings and chat completions.
//!
//! The API key is read from the configured environment variable on every
//! call and is never stored, logged, or echoed in errors.

use std::time::Duration;

use serde_json::{json, Value};

use skillsynth_core::provider::{
    EmbeddingBatch, EmbeddingProvider, Generation, GenerationProvider, GenerationRequest, ProviderError,
};

use crate::config::ProviderSpec;

/// Retries after the first attempt for transient failures.
pub const MAX_RETRIES: u32 = 2;

pub struct HttpProvider {
    client: reqwest::blocking::Client,
    model: String,
    endpoint: String,
    key_env: String,
    backoff: Duration,
}

impl HttpProvider {
    pub fn new(spec: &ProviderSpec) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(spec.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Unavailable(format!("http client: {e}")))?;
        Ok(Self {
            client,
            model: spec.model.clone(),
            endpoint: spec.endpoint.trim_end_matches('/').to_string(),
            key_env: spec.key_env.clone(),
            backoff: Duration::from_millis(spec.retry_backoff_ms),
        })
    }

    fn key(&self) -> Result<String, ProviderError> {
        std::env::var(&self.key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| ProviderError::Unavailable(format!("environment variable {} is not set", self.key_env)))
    }

    fn post_once(&self, path: &str, body: &Value, key: &str) -> Result<Value, ProviderError> {
        let redact = |text: String| text.replace(key, "[redacted]");
        let response = self
            .client
            .post(format!("{}{path}", self.endpoint))
            .bearer_auth(key)
            .json(body)
            .send()
            .map_err(|e| ProviderError::Transport(redact(e.without_url().to_string())))?;
        let status = response.status();
        let text = response.text().map_err(|e| ProviderError::Transport(redact(e.to_string())))?;
        if !status.is_success() {
            return Err(ProviderError::Status { status: status.as_u16(), body: redact(text) });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::InvalidResponse(format!("not JSON: {e}")))
    }

    /// POST with up to `MAX_RETRIES` retries on transient failures.
    /// Returns the response and the number of retries spent.
    fn post(&self, path: &str, body: &Value) -> Result<(Value, u32), ProviderError> {
        let key = self.key()?;
        let mut retries = 0;
        loop {
            match self.post_once(path, body, &key) {
                Ok(v) => return Ok((v, retries)),
                Err(e) if e.is_transient() && retries < MAX_RETRIES => {
                    tracing::warn!(endpoint = %self.endpoint, path, retry = retries + 1, error = %e, "transient provider failure");
                    std::thread::sleep(self.backoff * 2u32.pow(retries));
                    retries += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn usage(v: &Value, field: &str) -> u64 {
    v.pointer(&format!("/usage/{field}")).and_then(Value::as_u64).unwrap_or(0)
}

impl EmbeddingProvider for HttpProvider {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> Result<EmbeddingBatch, ProviderError> {
        let (v, retries) = self.post("/embeddings", &json!({ "model": self.model, "input": texts }))?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::InvalidResponse("missing `data`".into()))?;
        let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
            let vector = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| ProviderError::InvalidResponse("missing `embedding`".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| ProviderError::InvalidResponse("non-numeric embedding".into())))
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(EmbeddingBatch {
            vectors: rows.into_iter().map(|(_, v)| v).collect(),
            input_tokens: usage(&v, "prompt_tokens"),
            retries,
        })
    }
}

impl GenerationProvider for HttpProvider {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, ProviderError> {
        let body = json!({
            "model": self.model,
            "messages": [
                { "role": "system", "content": request.system },
                { "role": "user", "content": request.user },
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let (v, retries) = self.post("/chat/completions", &body)?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::InvalidResponse("missing `choices[0].message.content`".into()))?
            .to_string();
        Ok(Generation {
            text,
            decoded_tokens: usage(&v, "completion_tokens"),
            input_tokens: usage(&v, "prompt_tokens"),
            retries,
        })
    }
}
