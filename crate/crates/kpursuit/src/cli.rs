//! Command-line interface.
//!
//! Verbs: `ingest`, `index build`, `pursue`, `enhance`, `generate`,
//! `synthesize`, `eval`, `serve`. Exit codes: 0 success, 1 usage error,
//! 2 stage failure.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::aggregate::Provenance;
use crate::config::{parse_policy, PipelineConfig};
use crate::corpus::FactStore;
use crate::embed::{EncoderProvider, HashedBagEncoder};
use crate::error::Error;
use crate::eval::{load_tasks, run_benchmark, ContainmentOracle, StrategyConfig, StrategyKind};
use crate::generate::{GenModality, GeneratorAdapter, MockGenerator};
use crate::index::VectorIndex;
use crate::pipeline::Pipeline;
use crate::pursuit::{pursue, PursuitConfig};

#[derive(Parser)]
#[command(
    name = "kpursuit",
    version,
    about = "Recursive knowledge pursuit for prompt enhancement and text-driven generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk documents into a fact store
    Ingest {
        /// Plain-text or JSON Lines ({"title", "text"} per line) files
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Words per block
        #[arg(long, default_value_t = crate::corpus::DEFAULT_BLOCK_SIZE)]
        block_size: usize,
        /// Fact store to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Vector index operations
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Run the pursuit loop for one prompt
    Pursue {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 8)]
        max_facts: usize,
        /// Stop when the winning relevance score falls below this
        #[arg(long)]
        threshold: Option<f64>,
        /// Stop when an append moves the context embedding less than this
        #[arg(long)]
        epsilon: Option<f64>,
        /// Stop before exceeding this many context tokens
        #[arg(long)]
        token_budget: Option<usize>,
        /// Context embedding policy: concat or centroid
        #[arg(long, default_value = "concat")]
        policy: String,
        /// Write the trace JSON here (stdout when omitted)
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Pipeline config, required for remote-built indexes
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pursue and aggregate: produce an enhanced prompt
    Enhance {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Dispatch an enhanced prompt to a generator backend
    Generate {
        /// `mock` or `remote`
        #[arg(long)]
        backend: String,
        /// Enhanced-prompt JSON (from `enhance`) or a plain-text prompt file
        #[arg(long)]
        prompt_file: PathBuf,
        /// Artifact payload destination
        #[arg(long)]
        out: PathBuf,
        /// Pipeline config, required for remote backends
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Full pipeline: pursue, aggregate, generate
    Synthesize {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare retrieval strategies on a task file
    Eval {
        /// JSON Lines of QA tasks
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Comma-separated: pursue,static,replug
        #[arg(long, default_value = "pursue,static,replug")]
        strategies: String,
        /// Report JSON destination
        #[arg(long)]
        report: PathBuf,
        /// Context size per strategy
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Softmax temperature for replug weights
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the pipeline over HTTP
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed a fact store and write the index
    Build {
        #[arg(long)]
        store: PathBuf,
        /// `test` or `remote`
        #[arg(long, default_value = "test")]
        provider: String,
        /// Test-provider dimension
        #[arg(long, default_value_t = 256)]
        dim: usize,
        /// Test-provider token limit
        #[arg(long, default_value_t = 512)]
        max_tokens: usize,
        /// Prepend each fact's document title to its text before embedding
        #[arg(long)]
        prepend_title: bool,
        #[arg(long)]
        out: PathBuf,
        /// Pipeline config, required for the remote provider
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Stage(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        CliError::Stage(e)
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

/// Parse arguments from the process environment and execute.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            1
        }
        Err(CliError::Stage(error)) => {
            eprintln!("error: {error}");
            let mut source = std::error::Error::source(&error);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            2
        }
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest {
            input,
            block_size,
            out,
        } => ingest(&input, block_size, &out),
        Command::Index {
            command:
                IndexCommand::Build {
                    store,
                    provider,
                    dim,
                    max_tokens,
                    prepend_title,
                    out,
                    config,
                },
        } => index_build(
            &store,
            &provider,
            dim,
            max_tokens,
            prepend_title,
            &out,
            config.as_deref(),
        ),
        Command::Pursue {
            prompt,
            index,
            max_facts,
            threshold,
            epsilon,
            token_budget,
            policy,
            trace_out,
            config,
        } => {
            let pursuit = PursuitConfig {
                max_facts,
                relevance_threshold: threshold,
                convergence_epsilon: epsilon,
                context_token_budget: token_budget,
                embedding_policy: parse_policy(&policy).map_err(|e| usage(e.to_string()))?,
            };
            run_pursue(
                &prompt,
                &index,
                &pursuit,
                trace_out.as_deref(),
                config.as_deref(),
            )
        }
        Command::Enhance {
            prompt,
            config,
            out_dir,
        } => {
            let pipeline = load_pipeline(&config, out_dir)?;
            let (enhanced, trace) = pipeline.enhance(&prompt)?;
            println!("{}", enhanced.text);
            for variant in enhanced.variants.iter().skip(1) {
                println!("{variant}");
            }
            eprintln!(
                "pursued {} facts, stop reason {:?}",
                trace.steps.len(),
                trace.stop_reason
            );
            Ok(())
        }
        Command::Generate {
            backend,
            prompt_file,
            out,
            config,
        } => generate_cmd(&backend, &prompt_file, &out, config.as_deref()),
        Command::Synthesize {
            prompt,
            config,
            out_dir,
        } => {
            let out_dir = Some(out_dir.unwrap_or_else(|| PathBuf::from(".")));
            let pipeline = load_pipeline(&config, out_dir)?;
            let artifacts = pipeline.synthesize(&prompt)?;
            for (i, artifact) in artifacts.iter().enumerate() {
                println!(
                    "artifact-{i:03}.bin  {} bytes  {:?}",
                    artifact.payload.len(),
                    artifact.modality
                );
            }
            Ok(())
        }
        Command::Eval {
            tasks,
            index,
            strategies,
            report,
            k,
            temperature,
            config,
        } => eval_cmd(
            &tasks,
            &index,
            &strategies,
            &report,
            k,
            temperature,
            config.as_deref(),
        ),
        Command::Serve { config, addr } => {
            let pipeline = Arc::new(load_pipeline(&config, None)?);
            let runtime = tokio::runtime::Runtime::new().map_err(Error::Io)?;
            eprintln!("serving on {addr}");
            runtime
                .block_on(crate::service::serve(pipeline, &addr))
                .map_err(CliError::from)
        }
    }
}

#[derive(Deserialize)]
struct DocRecord {
    #[serde(default)]
    title: String,
    text: String,
}

fn ingest(inputs: &[PathBuf], block_size: usize, out: &Path) -> Result<(), CliError> {
    if block_size == 0 {
        return Err(usage("--block-size must be at least 1"));
    }
    let mut store = FactStore::new(block_size);
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(Error::Io)?;
        let is_jsonl = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("jsonl"));
        if is_jsonl {
            for (offset, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: DocRecord =
                    serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                        line: offset + 1,
                        message: e.to_string(),
                    })?;
                let title = if record.title.is_empty() {
                    format!("{}:{}", file_stem(path), offset + 1)
                } else {
                    record.title
                };
                store.add_document(&title, &record.text)?;
            }
        } else {
            store.add_document(&file_stem(path), &text)?;
        }
    }
    store.save(out)?;
    eprintln!(
        "ingested {} documents into {} facts (block size {block_size})",
        store.source_manifest().len(),
        store.len()
    );
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "doc".to_string())
}

fn index_build(
    store_path: &Path,
    provider: &str,
    dim: usize,
    max_tokens: usize,
    prepend_title: bool,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let store = FactStore::load(store_path)?;
    let encoder: Arc<dyn EncoderProvider> = match provider {
        "test" => Arc::new(HashedBagEncoder::new(dim, max_tokens)),
        "remote" => {
            let config_path = config.ok_or_else(|| usage("--provider remote requires --config"))?;
            PipelineConfig::load(config_path)?.build_encoder()?
        }
        other => return Err(usage(format!("unknown provider {other:?}"))),
    };
    let options = crate::index::BuildOptions { prepend_title };
    let index = VectorIndex::build_with_options(&store, encoder.as_ref(), &options)?;
    index.save(out)?;
    eprintln!(
        "indexed {} facts at dim {}{}",
        index.active_count(),
        index.dim(),
        if index.diagnostics().split_fallback_ids.is_empty() {
            String::new()
        } else {
            format!(
                " ({} over-long facts embedded via sentence centroids)",
                index.diagnostics().split_fallback_ids.len()
            )
        }
    );
    Ok(())
}

/// Reconstruct the provider an index was built with.
fn provider_for_index(
    index: &VectorIndex,
    config: Option<&Path>,
) -> Result<Arc<dyn EncoderProvider>, CliError> {
    match index.provider_name() {
        "test" => Ok(Arc::new(HashedBagEncoder::new(
            index.dim(),
            index.provider_max_tokens(),
        ))),
        "remote" => {
            let config_path = config.ok_or_else(|| {
                usage("this index was built with the remote provider; pass --config")
            })?;
            Ok(PipelineConfig::load(config_path)?.build_encoder()?)
        }
        other => Err(usage(format!(
            "index built with unknown provider {other:?}"
        ))),
    }
}

fn run_pursue(
    prompt: &str,
    index_path: &Path,
    config: &PursuitConfig,
    trace_out: Option<&Path>,
    pipeline_config: Option<&Path>,
) -> Result<(), CliError> {
    let index = VectorIndex::load(index_path)?;
    let provider = provider_for_index(&index, pipeline_config)?;
    let (context, trace) = pursue(prompt, &index, provider.as_ref(), config)?;
    let trace_json = serde_json::to_string_pretty(&trace).map_err(Error::Json)?;
    match trace_out {
        Some(path) => std::fs::write(path, trace_json + "\n").map_err(Error::Io)?,
        None => println!("{trace_json}"),
    }
    for fact in &context.facts {
        eprintln!("{}  {}", fact.id, fact.text);
    }
    eprintln!(
        "selected {} facts, stop reason {:?}, {} context tokens",
        context.facts.len(),
        trace.stop_reason,
        context.total_tokens
    );
    Ok(())
}

fn load_pipeline(config_path: &Path, out_dir: Option<PathBuf>) -> Result<Pipeline, CliError> {
    let mut config = PipelineConfig::load(config_path)?;
    if out_dir.is_some() {
        config.output_dir = out_dir;
    }
    Ok(Pipeline::from_config(&config)?)
}

fn generate_cmd(
    backend: &str,
    prompt_file: &Path,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let adapter: Arc<dyn GeneratorAdapter> = match backend {
        "mock" => {
            let (name, modality) = match config {
                Some(path) => {
                    let c = PipelineConfig::load(path)?;
                    (c.generator.name, c.generator.modality)
                }
                None => ("mock".to_string(), GenModality::Image),
            };
            Arc::new(MockGenerator::new(name, modality))
        }
        "remote" => {
            let config_path = config.ok_or_else(|| usage("--backend remote requires --config"))?;
            PipelineConfig::load(config_path)?.build_generator()?
        }
        other => return Err(usage(format!("unknown backend {other:?}"))),
    };

    let raw = std::fs::read_to_string(prompt_file).map_err(Error::Io)?;
    let is_json = prompt_file
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let prompt = if is_json {
        serde_json::from_str(&raw).map_err(Error::Json)?
    } else {
        // Bare text file: wrap it with file-level provenance.
        let text = raw.trim().to_string();
        crate::aggregate::EnhancedPrompt {
            provenance: Provenance {
                fact_ids: Vec::new(),
                instruction_sha256: crate::aggregate::sha256_hex(text.as_bytes()),
                provider_name: "file".to_string(),
                generator_name: adapter.name().to_string(),
            },
            text,
            variants: Vec::new(),
        }
    };

    let artifact = adapter.generate(&prompt)?;
    std::fs::write(out, &artifact.payload).map_err(Error::Io)?;
    eprintln!(
        "wrote {} bytes ({:?}) to {}",
        artifact.payload.len(),
        artifact.modality,
        out.display()
    );
    Ok(())
}

fn eval_cmd(
    tasks_path: &Path,
    index_path: &Path,
    strategies: &str,
    report_path: &Path,
    k: usize,
    temperature: f64,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let tasks = load_tasks(tasks_path)?;
    let index = VectorIndex::load(index_path)?;
    let provider = provider_for_index(&index, config)?;
    let strategy_configs: Vec<StrategyConfig> = strategies
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|name| {
            let kind: StrategyKind = name
                .trim()
                .parse()
                .map_err(|e: Error| usage(e.to_string()))?;
            let mut sc = StrategyConfig::new(kind, k);
            sc.temperature = temperature;
            Ok(sc)
        })
        .collect::<Result<_, CliError>>()?;
    if strategy_configs.is_empty() {
        return Err(usage("--strategies must name at least one strategy"));
    }

    let report = run_benchmark(
        &tasks,
        &strategy_configs,
        &index,
        provider.as_ref(),
        &ContainmentOracle,
    )?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::Json)?;
    std::fs::write(report_path, json + "\n").map_err(Error::Io)?;
    println!("{}", report.summary_table(&tasks));
    Ok(())
}
