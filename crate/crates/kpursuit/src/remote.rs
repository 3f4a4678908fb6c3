//! HTTP-backed providers: encoder, language model, and generator backends.
//!
//! Wire contracts:
//!
//! - encoder: `POST {"texts": [string, ...]}` returns
//!   `{"embeddings": [[number, ...], ...], "dim": p}`
//! - language model: `POST {"model": ..., "messages": [{"role", "content"}],
//!   "image": optional, "seed": n}` returns `{"text": ...}`
//! - generator: `POST {"prompt": ..., "negative_prompt": optional,
//!   "config": {...}}` returns the artifact bytes as the response body
//!
//! Transport failures and 5xx responses are retried with exponential backoff
//! up to a bounded attempt count; 4xx responses are surfaced immediately.
//! Each provider can share a [`Gate`] bounding in-flight requests.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::aggregate::{EnhancedPrompt, ImageHandle, LlmProvider, Modality};
use crate::embed::{Embedding, EncoderProvider, LanguageMode};
use crate::error::{Error, Result};
use crate::generate::{GenModality, GeneratedArtifact, GeneratorAdapter};

/// Counting semaphore bounding concurrent in-flight requests to a provider.
pub struct Gate {
    capacity: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
}

impl Gate {
    pub fn new(capacity: usize) -> Arc<Gate> {
        Arc::new(Gate {
            capacity: capacity.max(1),
            in_flight: Mutex::new(0),
            released: Condvar::new(),
        })
    }

    pub fn acquire(&self) -> GateGuard<'_> {
        let mut count = self.in_flight.lock().expect("gate lock");
        while *count >= self.capacity {
            count = self.released.wait(count).expect("gate lock");
        }
        *count += 1;
        GateGuard { gate: self }
    }
}

pub struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut count = self.gate.in_flight.lock().expect("gate lock");
        *count -= 1;
        self.gate.released.notify_one();
    }
}

fn retry_delay(attempt: u32) -> Duration {
    Duration::from_millis(50u64.saturating_mul(1 << attempt.min(6)))
}

/// Run `call` up to `1 + max_retries` times, retrying only errors marked
/// retryable (transport failures, 5xx).
fn with_retries<T>(
    max_retries: u32,
    mut call: impl FnMut() -> std::result::Result<T, (bool, Error)>,
) -> Result<T> {
    let mut attempt = 0;
    loop {
        match call() {
            Ok(v) => return Ok(v),
            Err((retryable, err)) => {
                if !retryable || attempt >= max_retries {
                    return Err(err);
                }
                std::thread::sleep(retry_delay(attempt));
                attempt += 1;
            }
        }
    }
}

fn transport(endpoint: &str, message: impl ToString) -> Error {
    Error::Transport {
        endpoint: endpoint.to_string(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEncoderConfig {
    pub endpoint: String,
    pub dim: usize,
    pub max_tokens: usize,
    pub batch_size: usize,
    /// L2-normalize returned vectors, turning inner product into cosine.
    /// Off by default: the relevance function is the raw inner product.
    pub normalize: bool,
    pub language_mode: LanguageMode,
    pub auth_token: Option<String>,
    pub max_retries: u32,
    pub timeout: Duration,
}

impl Default for RemoteEncoderConfig {
    fn default() -> RemoteEncoderConfig {
        RemoteEncoderConfig {
            endpoint: String::new(),
            dim: 0,
            max_tokens: 512,
            batch_size: 16,
            normalize: false,
            language_mode: LanguageMode::Monolingual,
            auth_token: None,
            max_retries: 3,
            timeout: Duration::from_secs(30),
        }
    }
}

/// Client for a hosted contrastive text encoder.
pub struct RemoteEncoder {
    config: RemoteEncoderConfig,
    client: reqwest::blocking::Client,
    gate: Option<Arc<Gate>>,
}

#[derive(Deserialize)]
struct EncodeResponse {
    embeddings: Vec<Vec<f64>>,
    dim: usize,
}

impl RemoteEncoder {
    pub fn new(config: RemoteEncoderConfig) -> Result<RemoteEncoder> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| transport(&config.endpoint, e))?;
        Ok(RemoteEncoder {
            config,
            client,
            gate: None,
        })
    }

    pub fn with_gate(mut self, gate: Arc<Gate>) -> RemoteEncoder {
        self.gate = Some(gate);
        self
    }

    fn post_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let _guard = self.gate.as_ref().map(|g| g.acquire());
        let endpoint = &self.config.endpoint;
        let response: EncodeResponse = with_retries(self.config.max_retries, || {
            let mut req = self.client.post(endpoint).json(&json!({ "texts": texts }));
            if let Some(token) = &self.config.auth_token {
                req = req.bearer_auth(token);
            }
            let resp = req.send().map_err(|e| (true, transport(endpoint, e)))?;
            let status = resp.status();
            if status.is_server_error() {
                return Err((true, transport(endpoint, format!("status {status}"))));
            }
            if !status.is_success() {
                return Err((false, transport(endpoint, format!("status {status}"))));
            }
            resp.json::<EncodeResponse>()
                .map_err(|e| (false, transport(endpoint, format!("bad body: {e}"))))
        })?;

        if response.dim != self.config.dim {
            return Err(Error::DimensionMismatch {
                left: self.config.dim,
                right: response.dim,
            });
        }
        if response.embeddings.len() != texts.len() {
            return Err(transport(
                endpoint,
                format!(
                    "asked for {} embeddings, got {}",
                    texts.len(),
                    response.embeddings.len()
                ),
            ));
        }
        response
            .embeddings
            .into_iter()
            .map(|v| {
                let e = Embedding::new(v)?;
                if e.dim() != self.config.dim {
                    return Err(Error::DimensionMismatch {
                        left: self.config.dim,
                        right: e.dim(),
                    });
                }
                Ok(if self.config.normalize {
                    e.l2_normalized()
                } else {
                    e
                })
            })
            .collect()
    }
}

impl EncoderProvider for RemoteEncoder {
    fn name(&self) -> &str {
        "remote"
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn max_tokens(&self) -> usize {
        self.config.max_tokens
    }

    fn language_mode(&self) -> LanguageMode {
        self.config.language_mode
    }

    // The provider-declared counting rule; whitespace words approximate the
    // service-side tokenizer conservatively enough to gate the centroid
    // fallback.
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn encode(&self, text: &str) -> Result<Embedding> {
        let tokens = self.count_tokens(text);
        if tokens == 0 {
            return Err(Error::EmptyText);
        }
        if tokens > self.config.max_tokens {
            return Err(Error::OverLength {
                tokens,
                max_tokens: self.config.max_tokens,
            });
        }
        Ok(self
            .post_batch(std::slice::from_ref(&text.to_string()))?
            .remove(0))
    }

    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.config.batch_size.max(1)) {
            out.extend(self.post_batch(chunk)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteLlmConfig {
    pub endpoint: String,
    /// Pinned model snapshot identifier, sent verbatim.
    pub model: String,
    pub max_context_tokens: usize,
    pub modality: Modality,
    pub auth_token: Option<String>,
    pub max_retries: u32,
    pub timeout: Duration,
}

/// Client for a hosted chat-completion language model.
pub struct RemoteLlm {
    config: RemoteLlmConfig,
    client: reqwest::blocking::Client,
    gate: Option<Arc<Gate>>,
    image: Option<ImageHandle>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

impl RemoteLlm {
    pub fn new(config: RemoteLlmConfig) -> Result<RemoteLlm> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| transport(&config.endpoint, e))?;
        Ok(RemoteLlm {
            config,
            client,
            gate: None,
            image: None,
        })
    }

    pub fn with_gate(mut self, gate: Arc<Gate>) -> RemoteLlm {
        self.gate = Some(gate);
        self
    }

    /// Attach an image to every request (vision-capable deployments).
    pub fn with_image(mut self, image: ImageHandle) -> RemoteLlm {
        self.image = Some(image);
        self
    }
}

impl LlmProvider for RemoteLlm {
    fn name(&self) -> &str {
        "remote"
    }

    fn max_context_tokens(&self) -> usize {
        self.config.max_context_tokens
    }

    fn modality(&self) -> Modality {
        self.config.modality
    }

    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn complete(&self, instruction: &str, seed: u64) -> Result<String> {
        let _guard = self.gate.as_ref().map(|g| g.acquire());
        let endpoint = &self.config.endpoint;
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": instruction}],
            "seed": seed,
        });
        if let Some(image) = &self.image {
            body["image"] = json!(image.0);
        }
        let response: CompletionResponse = with_retries(self.config.max_retries, || {
            let mut req = self.client.post(endpoint).json(&body);
            if let Some(token) = &self.config.auth_token {
                req = req.bearer_auth(token);
            }
            let resp = req.send().map_err(|e| (true, transport(endpoint, e)))?;
            let status = resp.status();
            if status.is_server_error() {
                return Err((true, transport(endpoint, format!("status {status}"))));
            }
            if !status.is_success() {
                return Err((false, transport(endpoint, format!("status {status}"))));
            }
            resp.json::<CompletionResponse>()
                .map_err(|e| (false, transport(endpoint, format!("bad body: {e}"))))
        })?;
        Ok(response.text)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteGeneratorConfig {
    /// Also the `<Generator>` substitution for aggregation.
    pub name: String,
    pub modality: GenModality,
    pub endpoint: String,
    pub negative_prompt: Option<String>,
    /// Opaque passthrough (e.g. FreeU parameters), sent under `config`.
    pub passthrough: BTreeMap<String, String>,
    pub auth_token: Option<String>,
    pub timeout: Duration,
}

/// Client for a hosted text-driven generator.
pub struct RemoteGenerator {
    config: RemoteGeneratorConfig,
    client: reqwest::blocking::Client,
}

impl RemoteGenerator {
    pub fn new(config: RemoteGeneratorConfig) -> Result<RemoteGenerator> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| transport(&config.endpoint, e))?;
        Ok(RemoteGenerator { config, client })
    }
}

impl GeneratorAdapter for RemoteGenerator {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn modality(&self) -> GenModality {
        self.config.modality
    }

    fn passthrough(&self) -> &BTreeMap<String, String> {
        &self.config.passthrough
    }

    fn generate(&self, prompt: &EnhancedPrompt) -> Result<GeneratedArtifact> {
        let endpoint = &self.config.endpoint;
        let mut req = self.client.post(endpoint).json(&json!({
            "prompt": prompt.text,
            "negative_prompt": self.config.negative_prompt,
            "config": self.config.passthrough,
        }));
        if let Some(token) = &self.config.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| transport(endpoint, e))?;
        let status = resp.status();
        if !status.is_success() {
            // Content-policy rejections and other backend refusals come back
            // verbatim in the body.
            let body = resp.text().unwrap_or_default();
            return Err(Error::Backend {
                backend: self.config.name.clone(),
                message: format!("status {status}: {body}"),
            });
        }
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("application/octet-stream")
            .to_string();
        let payload = resp.bytes().map_err(|e| transport(endpoint, e))?.to_vec();
        if payload.is_empty() {
            return Err(Error::Backend {
                backend: self.config.name.clone(),
                message: "empty payload".to_string(),
            });
        }

        let mut backend_metadata = BTreeMap::new();
        backend_metadata.insert("backend".to_string(), self.config.name.clone());
        backend_metadata.insert("content_type".to_string(), content_type);
        if self.config.name != prompt.provenance.generator_name {
            backend_metadata.insert(
                "generator_name_mismatch".to_string(),
                format!(
                    "prompt was enhanced for {:?}, dispatched to {:?}",
                    prompt.provenance.generator_name, self.config.name
                ),
            );
        }
        Ok(GeneratedArtifact {
            modality: self.config.modality,
            payload,
            prompt_provenance: prompt.provenance.clone(),
            backend_metadata,
        })
    }
}
