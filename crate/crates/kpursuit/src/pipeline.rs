//! End-to-end orchestration: pursue, aggregate, generate.
//!
//! Errors surface with the name of the stage that failed. When an output
//! directory is configured, every intermediate artifact of a run is
//! persisted next to the final one: the knowledge context, the pursuit
//! trace, the assembled instruction, the enhanced prompt, and per-artifact
//! provenance.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::aggregate::{
    aggregate, assemble_instruction, EnhancedPrompt, InstructionBundle, LlmProvider,
};
use crate::config::PipelineConfig;
use crate::embed::EncoderProvider;
use crate::error::{Error, Result};
use crate::generate::{GeneratedArtifact, GeneratorAdapter};
use crate::index::VectorIndex;
use crate::pursuit::{pursue, KnowledgeContext, PursuitConfig, PursuitTrace};

/// A resolved pipeline: providers constructed, index loaded.
pub struct Pipeline {
    pub encoder: Arc<dyn EncoderProvider>,
    pub llm: Arc<dyn LlmProvider>,
    pub generator: Arc<dyn GeneratorAdapter>,
    pub index: Arc<VectorIndex>,
    pub bundle: InstructionBundle,
    pub pursuit: PursuitConfig,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Pipeline {
    /// Resolve a configuration into a runnable pipeline.
    pub fn from_config(config: &PipelineConfig) -> Result<Pipeline> {
        let encoder = config.build_encoder().map_err(|e| e.at_stage("config"))?;
        let llm = config.build_llm().map_err(|e| e.at_stage("config"))?;
        let generator = config.build_generator().map_err(|e| e.at_stage("config"))?;
        let bundle = config.build_bundle().map_err(|e| e.at_stage("config"))?;
        let index_path =
            config.paths.index.as_ref().ok_or_else(|| {
                Error::Config("paths.index is required".into()).at_stage("config")
            })?;
        let index = VectorIndex::load(index_path).map_err(|e| e.at_stage("index"))?;
        Ok(Pipeline {
            encoder,
            llm,
            generator,
            index: Arc::new(index),
            bundle,
            pursuit: config.pursuit.clone(),
            seed: config.seed,
            output_dir: config.output_dir.clone(),
        })
    }

    /// Pursue knowledge for a prompt, then aggregate it into an enhanced
    /// prompt.
    pub fn enhance(&self, prompt: &str) -> Result<(EnhancedPrompt, PursuitTrace)> {
        self.enhance_with(prompt, &self.pursuit)
    }

    /// [`Pipeline::enhance`] with per-request pursuit overrides.
    pub fn enhance_with(
        &self,
        prompt: &str,
        pursuit_config: &PursuitConfig,
    ) -> Result<(EnhancedPrompt, PursuitTrace)> {
        let (context, trace) = pursue(prompt, &self.index, self.encoder.as_ref(), pursuit_config)
            .map_err(|e| e.at_stage("pursuit"))?;
        let enhanced = aggregate(self.llm.as_ref(), &self.bundle, &context, self.seed)
            .map_err(|e| e.at_stage("aggregation"))?;
        if let Some(dir) = &self.output_dir {
            self.persist_enhancement(dir, &context, &trace, &enhanced)
                .map_err(|e| e.at_stage("io"))?;
        }
        Ok((enhanced, trace))
    }

    /// Enhance, then dispatch to the generator backend: one artifact per
    /// prompt variant (a single artifact outside diversity mode).
    pub fn synthesize(&self, prompt: &str) -> Result<Vec<GeneratedArtifact>> {
        let (enhanced, _trace) = self.enhance(prompt)?;
        let prompts: Vec<EnhancedPrompt> = if enhanced.variants.is_empty() {
            vec![enhanced]
        } else {
            enhanced
                .variants
                .iter()
                .map(|variant| EnhancedPrompt {
                    text: variant.clone(),
                    variants: Vec::new(),
                    provenance: enhanced.provenance.clone(),
                })
                .collect()
        };

        let mut artifacts = Vec::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            let artifact = self
                .generator
                .generate(p)
                .map_err(|e| e.at_stage("generation"))?;
            if let Some(dir) = &self.output_dir {
                persist_artifact(dir, i, &artifact).map_err(|e| e.at_stage("io"))?;
            }
            artifacts.push(artifact);
        }
        Ok(artifacts)
    }

    fn persist_enhancement(
        &self,
        dir: &Path,
        context: &KnowledgeContext,
        trace: &PursuitTrace,
        enhanced: &EnhancedPrompt,
    ) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(dir.join("context.json"), context)?;
        write_json(dir.join("trace.json"), trace)?;
        write_json(dir.join("enhanced_prompt.json"), enhanced)?;
        let instruction = assemble_instruction(&self.bundle, context, self.llm.modality())?;
        std::fs::write(dir.join("instruction.txt"), instruction)?;
        Ok(())
    }
}

fn persist_artifact(dir: &Path, ordinal: usize, artifact: &GeneratedArtifact) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join(format!("artifact-{ordinal:03}.bin")),
        &artifact.payload,
    )?;
    write_json(
        dir.join(format!("artifact-{ordinal:03}.provenance.json")),
        &ArtifactSidecar {
            modality: artifact.modality,
            prompt_provenance: &artifact.prompt_provenance,
            backend_metadata: &artifact.backend_metadata,
        },
    )
}

#[derive(serde::Serialize)]
struct ArtifactSidecar<'a> {
    modality: crate::generate::GenModality,
    prompt_provenance: &'a crate::aggregate::Provenance,
    backend_metadata: &'a std::collections::BTreeMap<String, String>,
}

fn write_json<T: serde::Serialize>(path: PathBuf, value: &T) -> Result<()> {
    let mut body = serde_json::to_vec_pretty(value)?;
    body.push(b'\n');
    std::fs::write(path, body)?;
    Ok(())
}
