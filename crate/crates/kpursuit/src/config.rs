//! Pipeline configuration: a TOML tree with environment-variable overrides
//! for endpoints and secrets.
//!
//! Secrets never live in the file: each remote section names the environment
//! variable holding its token (`auth_token_env`). Endpoints may be overridden
//! with `KPURSUIT_ENCODER_ENDPOINT`, `KPURSUIT_LLM_ENDPOINT` and
//! `KPURSUIT_GENERATOR_ENDPOINT`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::aggregate::{ImageHandle, InstructionBundle, LlmProvider, MockLlm, Modality};
use crate::embed::{EncoderProvider, HashedBagEncoder, LanguageMode};
use crate::error::{Error, Result};
use crate::generate::{GenModality, GeneratorAdapter, MockGenerator};
use crate::pursuit::{EmbeddingPolicy, PursuitConfig};
use crate::remote::{
    Gate, RemoteEncoder, RemoteEncoderConfig, RemoteGenerator, RemoteGeneratorConfig, RemoteLlm,
    RemoteLlmConfig,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    /// `test` for the offline hashed-bag encoder, `remote` for HTTP.
    pub provider: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_encoder_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub language_mode: Option<LanguageMode>,
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_dim() -> usize {
    256
}

fn default_encoder_max_tokens() -> usize {
    512
}

fn default_batch_size() -> usize {
    16
}

fn default_retries() -> u32 {
    3
}

impl Default for EncoderSection {
    fn default() -> EncoderSection {
        EncoderSection {
            provider: "test".to_string(),
            dim: default_dim(),
            max_tokens: default_encoder_max_tokens(),
            endpoint: None,
            batch_size: default_batch_size(),
            normalize: false,
            language_mode: None,
            auth_token_env: None,
            max_retries: default_retries(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSection {
    /// `mock:<behavior>` or `remote`.
    pub provider: String,
    /// Pinned model snapshot identifier for remote providers, opaque.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_llm_context")]
    pub max_context_tokens: usize,
    #[serde(default)]
    pub modality: Option<Modality>,
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_llm_context() -> usize {
    8192
}

impl Default for LlmSection {
    fn default() -> LlmSection {
        LlmSection {
            provider: "mock:echo".to_string(),
            model: None,
            endpoint: None,
            max_context_tokens: default_llm_context(),
            modality: None,
            auth_token_env: None,
            max_retries: default_retries(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    /// `mock` or `remote`.
    pub backend: String,
    /// Generator name used for the instruction substitution.
    #[serde(default = "default_generator_name")]
    pub name: String,
    #[serde(default = "default_gen_modality")]
    pub modality: GenModality,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub negative_prompt: Option<String>,
    #[serde(default)]
    pub passthrough: BTreeMap<String, String>,
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_gen_timeout")]
    pub timeout_secs: u64,
}

fn default_generator_name() -> String {
    "mock".to_string()
}

fn default_gen_modality() -> GenModality {
    GenModality::Image
}

fn default_gen_timeout() -> u64 {
    120
}

impl Default for GeneratorSection {
    fn default() -> GeneratorSection {
        GeneratorSection {
            backend: "mock".to_string(),
            name: default_generator_name(),
            modality: default_gen_modality(),
            endpoint: None,
            negative_prompt: None,
            passthrough: BTreeMap::new(),
            auth_token_env: None,
            timeout_secs: default_gen_timeout(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSection {
    /// `[min, max]` variant count; enables diversity mode.
    #[serde(default)]
    pub diversity: Option<[usize; 2]>,
    #[serde(default)]
    pub reference_image: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default)]
    pub store: Option<PathBuf>,
    #[serde(default)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSection {
    #[serde(default = "default_encoder_in_flight")]
    pub encoder_in_flight: usize,
    #[serde(default = "default_llm_in_flight")]
    pub llm_in_flight: usize,
}

fn default_encoder_in_flight() -> usize {
    8
}

fn default_llm_in_flight() -> usize {
    2
}

impl Default for LimitsSection {
    fn default() -> LimitsSection {
        LimitsSection {
            encoder_in_flight: default_encoder_in_flight(),
            llm_in_flight: default_llm_in_flight(),
        }
    }
}

/// The full pipeline configuration tree.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub llm: LlmSection,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub pursuit: PursuitConfig,
    #[serde(default)]
    pub aggregation: AggregationSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub limits: LimitsSection,
}

impl PipelineConfig {
    /// Parse a TOML string and apply environment overrides. Referenced paths
    /// must exist.
    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        let mut config: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.apply_env_overrides();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        PipelineConfig::from_toml(&text)
    }

    fn apply_env_overrides(&mut self) {
        if let Ok(v) = std::env::var("KPURSUIT_ENCODER_ENDPOINT") {
            self.encoder.endpoint = Some(v);
        }
        if let Ok(v) = std::env::var("KPURSUIT_LLM_ENDPOINT") {
            self.llm.endpoint = Some(v);
        }
        if let Ok(v) = std::env::var("KPURSUIT_GENERATOR_ENDPOINT") {
            self.generator.endpoint = Some(v);
        }
    }

    fn validate(&self) -> Result<()> {
        for path in [&self.paths.store, &self.paths.index].into_iter().flatten() {
            if !path.exists() {
                return Err(Error::MissingPath(path.clone()));
            }
        }
        if let Some([min, max]) = self.aggregation.diversity {
            crate::aggregate::DiversityRange::new(min, max)?;
        }
        // Provider names must resolve now; endpoint completeness is checked
        // when the provider is actually built.
        if !matches!(self.encoder.provider.as_str(), "test" | "remote") {
            return Err(Error::UnknownProvider(self.encoder.provider.clone()));
        }
        if self.llm.provider != "remote" && MockLlm::from_name(&self.llm.provider).is_none() {
            return Err(Error::UnknownProvider(self.llm.provider.clone()));
        }
        if !matches!(self.generator.backend.as_str(), "mock" | "remote") {
            return Err(Error::UnknownProvider(self.generator.backend.clone()));
        }
        Ok(())
    }

    /// Build the configured encoder provider.
    pub fn build_encoder(&self) -> Result<Arc<dyn EncoderProvider>> {
        let section = &self.encoder;
        match section.provider.as_str() {
            "test" => {
                let mut enc = HashedBagEncoder::new(section.dim, section.max_tokens);
                if section.language_mode == Some(LanguageMode::Multilingual) {
                    enc = enc.multilingual();
                }
                Ok(Arc::new(enc))
            }
            "remote" => {
                let endpoint = section
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("encoder.endpoint is required".into()))?;
                let encoder = RemoteEncoder::new(RemoteEncoderConfig {
                    endpoint,
                    dim: section.dim,
                    max_tokens: section.max_tokens,
                    batch_size: section.batch_size,
                    normalize: section.normalize,
                    language_mode: section.language_mode.unwrap_or(LanguageMode::Monolingual),
                    auth_token: read_token(&section.auth_token_env),
                    max_retries: section.max_retries,
                    timeout: Duration::from_secs(30),
                })?
                .with_gate(Gate::new(self.limits.encoder_in_flight));
                Ok(Arc::new(encoder))
            }
            other => Err(Error::UnknownProvider(other.to_string())),
        }
    }

    /// Build the configured language model provider.
    pub fn build_llm(&self) -> Result<Arc<dyn LlmProvider>> {
        let section = &self.llm;
        if let Some(mock) = MockLlm::from_name(&section.provider) {
            let mut mock = mock.with_max_context_tokens(section.max_context_tokens);
            if section.modality == Some(Modality::VisionCapable) {
                mock = mock.vision_capable();
            }
            return Ok(Arc::new(mock));
        }
        match section.provider.as_str() {
            "remote" => {
                let endpoint = section
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("llm.endpoint is required".into()))?;
                let modality = section.modality.unwrap_or(Modality::TextOnly);
                let mut llm = RemoteLlm::new(RemoteLlmConfig {
                    endpoint,
                    model: section.model.clone().unwrap_or_default(),
                    max_context_tokens: section.max_context_tokens,
                    modality,
                    auth_token: read_token(&section.auth_token_env),
                    max_retries: section.max_retries,
                    timeout: Duration::from_secs(60),
                })?
                .with_gate(Gate::new(self.limits.llm_in_flight));
                if let (Modality::VisionCapable, Some(image)) =
                    (modality, &self.aggregation.reference_image)
                {
                    llm = llm.with_image(ImageHandle(image.clone()));
                }
                Ok(Arc::new(llm))
            }
            other => Err(Error::UnknownProvider(other.to_string())),
        }
    }

    /// Build the configured generator adapter.
    pub fn build_generator(&self) -> Result<Arc<dyn GeneratorAdapter>> {
        let section = &self.generator;
        match section.backend.as_str() {
            "mock" => Ok(Arc::new(
                MockGenerator::new(section.name.clone(), section.modality)
                    .with_passthrough(section.passthrough.clone()),
            )),
            "remote" => {
                let endpoint = section
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("generator.endpoint is required".into()))?;
                Ok(Arc::new(RemoteGenerator::new(RemoteGeneratorConfig {
                    name: section.name.clone(),
                    modality: section.modality,
                    endpoint,
                    negative_prompt: section.negative_prompt.clone(),
                    passthrough: section.passthrough.clone(),
                    auth_token: read_token(&section.auth_token_env),
                    timeout: Duration::from_secs(section.timeout_secs),
                })?))
            }
            other => Err(Error::UnknownProvider(other.to_string())),
        }
    }

    /// Build the instruction bundle from the aggregation section.
    pub fn build_bundle(&self) -> Result<InstructionBundle> {
        let mut bundle = InstructionBundle::standard(self.generator.name.clone());
        if let Some([min, max]) = self.aggregation.diversity {
            bundle = bundle.with_diversity(min, max)?;
        }
        if let Some(image) = &self.aggregation.reference_image {
            bundle = bundle.with_reference_image(ImageHandle(image.clone()));
        }
        Ok(bundle)
    }
}

fn read_token(env_name: &Option<String>) -> Option<String> {
    env_name.as_ref().and_then(|name| std::env::var(name).ok())
}

/// Parse the CLI policy token.
pub fn parse_policy(s: &str) -> Result<EmbeddingPolicy> {
    match s {
        "concat" | "concat-then-encode" => Ok(EmbeddingPolicy::ConcatThenEncode),
        "centroid" | "centroid-of-members" => Ok(EmbeddingPolicy::CentroidOfMembers),
        other => Err(Error::Config(format!(
            "unknown policy {other:?}; expected concat or centroid"
        ))),
    }
}
