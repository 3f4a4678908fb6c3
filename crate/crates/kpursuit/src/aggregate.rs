//! Instruction assembly and LLM-driven context aggregation.
//!
//! The in-context instruction has three fixed paragraphs — a parsing
//! demonstration, the enhancement request (with the downstream generator's
//! name substituted in), and the knowledge-rejection license — followed by
//! the knowledge context and the original prompt. The paragraph texts ship
//! as versioned template assets under `templates/` and are pinned by golden
//! files; do not edit them casually.
//!
//! The rejection paragraph is always present: the language model keeps the
//! license to ignore retrieved facts it judges irrelevant or conflicting.
//! Diversity mode appends one more paragraph asking for an indexed list of
//! prompt variants and is opt-in because it costs output tokens.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pursuit::KnowledgeContext;

/// Hex-encoded SHA-256, used for instruction hashes and payload digests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Template assets, embedded at compile time.
pub const INSTRUCTION_TEMPLATE_VERSION: &str = "1";
const PREAMBLE: &str = include_str!("../templates/preamble.txt");
const ENHANCEMENT_REQUEST: &str = include_str!("../templates/enhancement_request.txt");
const KNOWLEDGE_REJECTION: &str = include_str!("../templates/knowledge_rejection.txt");
const DIVERSITY: &str = include_str!("../templates/diversity.txt");
const DEMONSTRATION: &str = include_str!("../templates/demonstration.json");

/// Opaque handle to a reference image: a file path or URL. Provider adapters
/// decide how it goes on the wire; assembly only marks its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageHandle(pub String);

/// The worked example shown to the model before the real request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub facts: Vec<String>,
    pub original_prompt: String,
    pub enhanced_prompt: String,
    pub reference_image: Option<ImageHandle>,
}

#[derive(Deserialize)]
struct DemonstrationAsset {
    facts: Vec<String>,
    original_prompt: String,
    enhanced_prompt: String,
    reference_image: String,
}

impl Demonstration {
    /// The default worked example shipped with the templates. `with_image`
    /// attaches its reference image for vision-capable providers.
    pub fn standard(with_image: bool) -> Demonstration {
        let asset: DemonstrationAsset =
            serde_json::from_str(DEMONSTRATION).expect("bundled demonstration asset is valid");
        Demonstration {
            facts: asset.facts,
            original_prompt: asset.original_prompt,
            enhanced_prompt: asset.enhanced_prompt,
            reference_image: with_image.then_some(ImageHandle(asset.reference_image)),
        }
    }
}

/// Requested number of prompt variants in diversity mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversityRange {
    pub min: usize,
    pub max: usize,
}

impl DiversityRange {
    pub fn new(min: usize, max: usize) -> Result<DiversityRange> {
        if min < 2 || max < min {
            return Err(Error::InvalidDiversityRange { min, max });
        }
        Ok(DiversityRange { min, max })
    }

    /// Rendering of the `{range}` substitution: the requested variant count,
    /// e.g. `3-5`.
    fn render(&self) -> String {
        format!("{}-{}", self.min, self.max)
    }
}

/// Everything needed to assemble the instruction besides the knowledge
/// context itself.
///
/// One demonstration is the default; the bundle accepts more, rendered in
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionBundle {
    pub demonstrations: Vec<Demonstration>,
    /// Substituted into the enhancement request so the model writes for this
    /// backend, e.g. "Stable Diffusion XL" or "DreamFusion".
    pub generator_name: String,
    pub diversity: Option<DiversityRange>,
    /// User-supplied reference image accompanying the real request.
    pub reference_image: Option<ImageHandle>,
    pub preamble: String,
}

impl InstructionBundle {
    /// Bundle with the shipped preamble and demonstration.
    pub fn standard(generator_name: impl Into<String>) -> InstructionBundle {
        InstructionBundle {
            demonstrations: vec![Demonstration::standard(false)],
            generator_name: generator_name.into(),
            diversity: None,
            reference_image: None,
            preamble: PREAMBLE.to_string(),
        }
    }

    pub fn with_diversity(mut self, min: usize, max: usize) -> Result<InstructionBundle> {
        self.diversity = Some(DiversityRange::new(min, max)?);
        Ok(self)
    }

    /// Attach a reference image to the request; the standard demonstration
    /// gains its reference image too so the in-context example matches.
    pub fn with_reference_image(mut self, handle: ImageHandle) -> InstructionBundle {
        self.reference_image = Some(handle);
        self.demonstrations = vec![Demonstration::standard(true)];
        self
    }

    pub fn with_extra_demonstration(mut self, demo: Demonstration) -> InstructionBundle {
        self.demonstrations.push(demo);
        self
    }
}

/// Whether a language model provider accepts image attachments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    TextOnly,
    VisionCapable,
}

/// A language model behind a completion interface.
pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;
    fn max_context_tokens(&self) -> usize;
    fn modality(&self) -> Modality;
    /// Token count under this provider's counting rule.
    fn count_tokens(&self, text: &str) -> usize;
    /// Complete an instruction. Mock providers are pure in
    /// `(instruction, seed)`.
    fn complete(&self, instruction: &str, seed: u64) -> Result<String>;
}

/// Where an enhanced prompt came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Context fact ids, in selection order.
    pub fact_ids: Vec<String>,
    /// SHA-256 of the assembled instruction, hex.
    pub instruction_sha256: String,
    pub provider_name: String,
    pub generator_name: String,
}

/// The aggregated output: a prompt ready for a generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancedPrompt {
    pub text: String,
    /// All variants in diversity mode (the first is `text`); empty otherwise.
    pub variants: Vec<String>,
    pub provenance: Provenance,
}

fn fact_lines(out: &mut String, facts: &[String]) {
    for (i, fact) in facts.iter().enumerate() {
        let flat = fact.split_whitespace().collect::<Vec<_>>().join(" ");
        out.push_str(&format!("Fact {}. {flat}\n", i + 1));
    }
}

/// Assemble the full instruction text for a context.
///
/// Output is byte-deterministic in its inputs. Paragraphs are separated by
/// blank lines; the knowledge section lists context facts as `Fact k.` lines
/// in selection order; the text ends with the `Enhanced Prompt:` cue. Image
/// handles are rendered as `Reference Image:` lines only for vision-capable
/// providers, and any image on a text-only provider is a modality mismatch.
pub fn assemble_instruction(
    bundle: &InstructionBundle,
    context: &KnowledgeContext,
    modality: Modality,
) -> Result<String> {
    let has_images = bundle.reference_image.is_some()
        || bundle
            .demonstrations
            .iter()
            .any(|d| d.reference_image.is_some());
    if has_images && modality == Modality::TextOnly {
        return Err(Error::ModalityMismatch);
    }

    let mut out = String::new();
    out.push_str(bundle.preamble.trim_end());
    out.push_str("\n\n");

    for demo in &bundle.demonstrations {
        out.push_str("Here is a demonstration:\n");
        out.push_str("Knowledge:\n");
        fact_lines(&mut out, &demo.facts);
        if let Some(image) = &demo.reference_image {
            out.push_str(&format!("Reference Image: {}\n", image.0));
        }
        out.push_str(&format!("Original Prompt: {}\n", demo.original_prompt));
        out.push_str(&format!("Enhanced Prompt: {}\n", demo.enhanced_prompt));
        out.push('\n');
    }

    out.push_str(
        &ENHANCEMENT_REQUEST
            .trim_end()
            .replace("{generator}", &bundle.generator_name),
    );
    out.push_str("\n\n");

    out.push_str(KNOWLEDGE_REJECTION.trim_end());
    out.push_str("\n\n");

    if let Some(range) = &bundle.diversity {
        out.push_str(&DIVERSITY.trim_end().replace("{range}", &range.render()));
        out.push_str("\n\n");
    }

    out.push_str("Knowledge:\n");
    let fact_texts: Vec<String> = context.facts.iter().map(|f| f.text.clone()).collect();
    fact_lines(&mut out, &fact_texts);
    if let Some(image) = &bundle.reference_image {
        out.push_str(&format!("Reference Image: {}\n", image.0));
    }
    out.push_str(&format!("Original Prompt: {}\n", context.prompt));
    out.push_str("Enhanced Prompt:");
    Ok(out)
}

/// Parse a completion shaped as an indexed list (`1. …`, `2. …`) into items.
/// Continuation lines attach to the current item.
pub fn parse_indexed_list(completion: &str) -> Result<Vec<String>> {
    let mut items: Vec<String> = Vec::new();
    for line in completion.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = strip_index_prefix(trimmed) {
            items.push(rest.trim().to_string());
        } else if let Some(last) = items.last_mut() {
            if !trimmed.is_empty() {
                last.push(' ');
                last.push_str(trimmed.trim_end());
            }
        }
    }
    items.retain(|i| !i.is_empty());
    if items.is_empty() {
        return Err(Error::MalformedCompletion(
            "no `N. …` items found".to_string(),
        ));
    }
    Ok(items)
}

fn strip_index_prefix(line: &str) -> Option<&str> {
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    rest.strip_prefix(". ").or_else(|| rest.strip_prefix('.'))
}

/// Serialize variants back to the indexed-list form.
pub fn render_indexed_list(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, item)| format!("{}. {}", i + 1, item))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Assemble the instruction for a context and run it through the provider.
///
/// Fails with an over-budget error before any provider call when the
/// instruction exceeds the provider's context window (shrink `max_facts`).
/// In diversity mode the completion must carry at least `min` indexed items;
/// surplus items beyond `max` are dropped.
pub fn aggregate(
    provider: &dyn LlmProvider,
    bundle: &InstructionBundle,
    context: &KnowledgeContext,
    seed: u64,
) -> Result<EnhancedPrompt> {
    let instruction = assemble_instruction(bundle, context, provider.modality())?;
    let tokens = provider.count_tokens(&instruction);
    if tokens > provider.max_context_tokens() {
        return Err(Error::OverBudget {
            tokens,
            max_tokens: provider.max_context_tokens(),
        });
    }

    let completion = provider.complete(&instruction, seed)?;
    let (text, variants) = match &bundle.diversity {
        Some(range) => {
            let mut items = parse_indexed_list(&completion)?;
            if items.len() < range.min {
                return Err(Error::TooFewVariants {
                    got: items.len(),
                    min: range.min,
                });
            }
            items.truncate(range.max);
            (items[0].clone(), items)
        }
        None => (completion.trim().to_string(), Vec::new()),
    };
    if text.is_empty() {
        return Err(Error::MalformedCompletion("empty completion".to_string()));
    }

    let instruction_sha256 = sha256_hex(instruction.as_bytes());
    Ok(EnhancedPrompt {
        text,
        variants,
        provenance: Provenance {
            fact_ids: context.fact_ids(),
            instruction_sha256,
            provider_name: provider.name().to_string(),
            generator_name: bundle.generator_name.clone(),
        },
    })
}

/// Offline provider with scripted behaviors, selected by name:
/// `mock:echo` returns the original prompt, `mock:list:<n>` returns an
/// n-item indexed list derived from the original prompt, and
/// `mock:fixed:<text>` always returns `<text>`.
pub struct MockLlm {
    name: String,
    behavior: MockBehavior,
    max_context_tokens: usize,
    modality: Modality,
    calls: AtomicU64,
}

#[derive(Debug, Clone)]
enum MockBehavior {
    Echo,
    IndexedList(usize),
    Fixed(String),
}

impl MockLlm {
    pub fn echo() -> MockLlm {
        MockLlm::with_behavior("mock:echo", MockBehavior::Echo)
    }

    pub fn indexed_list(n: usize) -> MockLlm {
        MockLlm::with_behavior(format!("mock:list:{n}"), MockBehavior::IndexedList(n))
    }

    pub fn fixed(text: impl Into<String>) -> MockLlm {
        let text = text.into();
        MockLlm::with_behavior(format!("mock:fixed:{text}"), MockBehavior::Fixed(text))
    }

    /// Resolve a `mock:<behavior>` provider name.
    pub fn from_name(name: &str) -> Option<MockLlm> {
        let behavior = name.strip_prefix("mock:")?;
        if behavior == "echo" {
            Some(MockLlm::echo())
        } else if let Some(n) = behavior.strip_prefix("list:") {
            Some(MockLlm::indexed_list(n.parse().ok()?))
        } else {
            behavior.strip_prefix("fixed:").map(MockLlm::fixed)
        }
    }

    fn with_behavior(name: impl Into<String>, behavior: MockBehavior) -> MockLlm {
        MockLlm {
            name: name.into(),
            behavior,
            max_context_tokens: 8192,
            modality: Modality::TextOnly,
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_max_context_tokens(mut self, max: usize) -> MockLlm {
        self.max_context_tokens = max;
        self
    }

    pub fn vision_capable(mut self) -> MockLlm {
        self.modality = Modality::VisionCapable;
        self
    }

    /// Number of `complete` calls, for asserting that budget checks short-
    /// circuit before the provider is reached.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

/// The original prompt of the final request section, as the echo behavior
/// sees it.
fn extract_original_prompt(instruction: &str) -> String {
    instruction
        .rfind("Original Prompt: ")
        .map(|at| {
            let rest = &instruction["Original Prompt: ".len() + at..];
            rest.lines().next().unwrap_or("").to_string()
        })
        .unwrap_or_default()
}

impl LlmProvider for MockLlm {
    fn name(&self) -> &str {
        &self.name
    }

    fn max_context_tokens(&self) -> usize {
        self.max_context_tokens
    }

    fn modality(&self) -> Modality {
        self.modality
    }

    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn complete(&self, instruction: &str, _seed: u64) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.behavior {
            MockBehavior::Echo => Ok(extract_original_prompt(instruction)),
            MockBehavior::Fixed(text) => Ok(text.clone()),
            MockBehavior::IndexedList(n) => {
                let prompt = extract_original_prompt(instruction);
                let items: Vec<String> =
                    (1..=*n).map(|i| format!("{prompt}, variant {i}")).collect();
                Ok(render_indexed_list(&items))
            }
        }
    }
}
