//! Recursive knowledge pursuit.
//!
//! Starting from the task prompt alone, each iteration embeds the current
//! context, asks the index for the single most relevant fact not yet
//! selected, and appends it to the context. The appended fact changes the
//! context embedding, so the next query can reach facts related to what was
//! just learned rather than to the original prompt only. Selection-order
//! matters and is preserved everywhere downstream.
//!
//! Removal from the knowledge base is session-scoped: each pursuit keeps its
//! own exclusion set instead of mutating the shared index, so concurrent
//! pursuits over one index cannot observe each other's selections.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Fact;
use crate::embed::{centroid, encode_with_split_fallback, Embedding, EncoderProvider};
use crate::error::{Error, Result};
use crate::index::VectorIndex;

/// How the context is turned into a query embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum EmbeddingPolicy {
    /// Encode the serialized context directly while it fits the provider
    /// token limit; fall back to the centroid of member embeddings once it
    /// does not.
    #[default]
    #[serde(rename = "concat-then-encode", alias = "concat")]
    ConcatThenEncode,
    /// Always use the centroid of member embeddings.
    #[serde(rename = "centroid-of-members", alias = "centroid")]
    CentroidOfMembers,
}

/// Stopping knobs for the pursuit loop.
///
/// `relevance_threshold` and `convergence_epsilon` default to off: they are
/// alternative stopping criteria with no universal value, so enabling them is
/// an explicit choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PursuitConfig {
    /// Upper bound on selected facts (the knowledge context size).
    pub max_facts: usize,
    /// Stop before appending a winner whose relevance score is below this.
    pub relevance_threshold: Option<f64>,
    /// Stop after an append that moves the context embedding by less than
    /// this L2 distance.
    pub convergence_epsilon: Option<f64>,
    /// Stop before an append that would push the serialized context past
    /// this many tokens.
    pub context_token_budget: Option<usize>,
    pub embedding_policy: EmbeddingPolicy,
}

impl Default for PursuitConfig {
    fn default() -> PursuitConfig {
        PursuitConfig {
            max_facts: 8,
            relevance_threshold: None,
            convergence_epsilon: None,
            context_token_budget: None,
            embedding_policy: EmbeddingPolicy::ConcatThenEncode,
        }
    }
}

/// The task prompt plus the facts selected so far, with a cached embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeContext {
    pub prompt: String,
    /// Selected facts, in selection order.
    pub facts: Vec<Fact>,
    /// Embedding of the context under the policy that built it; recomputing
    /// with the same provider and policy reproduces it.
    pub embedding_state: Embedding,
    /// Token count of the serialized context under the provider rule.
    pub total_tokens: usize,
}

impl KnowledgeContext {
    /// The canonical text form: prompt, then facts in selection order,
    /// joined by single newlines.
    pub fn serialized(&self) -> String {
        serialize_context(&self.prompt, &self.facts)
    }

    pub fn fact_ids(&self) -> Vec<String> {
        self.facts.iter().map(|f| f.id.clone()).collect()
    }
}

/// Why a pursuit stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxSteps,
    Threshold,
    Converged,
    Budget,
    Exhausted,
}

/// One appended fact in a pursuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PursuitStep {
    /// 1-based step number.
    pub iteration: usize,
    pub fact_id: String,
    /// Relevance score of the search that selected this fact.
    pub score: f64,
    /// Serialized context tokens after the append.
    pub context_tokens: usize,
    /// Whether the context embedding computed after this append used the
    /// centroid fallback.
    pub fallback_used: bool,
}

/// Per-iteration observability record for one pursuit run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PursuitTrace {
    pub steps: Vec<PursuitStep>,
    pub stop_reason: StopReason,
}

/// Prompt and fact texts joined by single newlines, in selection order.
pub fn serialize_context(prompt: &str, facts: &[Fact]) -> String {
    let mut out = String::from(prompt);
    for fact in facts {
        out.push('\n');
        out.push_str(&fact.text);
    }
    out
}

/// Embed a context under a policy.
///
/// Returns the embedding and whether the centroid fallback was used. Under
/// [`EmbeddingPolicy::ConcatThenEncode`] the serialized context is encoded
/// directly while its token count fits the provider limit; past the limit
/// the result is the centroid of the member embeddings (prompt and each fact
/// separately). [`EmbeddingPolicy::CentroidOfMembers`] always takes the
/// centroid, reported as `fallback_used = false` since no fallback happened.
pub fn context_embedding(
    prompt: &str,
    facts: &[Fact],
    provider: &dyn EncoderProvider,
    policy: EmbeddingPolicy,
) -> Result<(Embedding, bool)> {
    match policy {
        EmbeddingPolicy::ConcatThenEncode => {
            let serialized = serialize_context(prompt, facts);
            if provider.count_tokens(&serialized) <= provider.max_tokens() {
                Ok((provider.encode(&serialized)?, false))
            } else {
                Ok((member_centroid(prompt, facts, provider)?, true))
            }
        }
        EmbeddingPolicy::CentroidOfMembers => {
            Ok((member_centroid(prompt, facts, provider)?, false))
        }
    }
}

fn member_centroid(
    prompt: &str,
    facts: &[Fact],
    provider: &dyn EncoderProvider,
) -> Result<Embedding> {
    let mut members = Vec::with_capacity(facts.len() + 1);
    members.push(encode_with_split_fallback(provider, prompt)?.0);
    for fact in facts {
        members.push(encode_with_split_fallback(provider, &fact.text)?.0);
    }
    centroid(&members)
}

/// Run the recursive pursuit loop.
///
/// Each iteration searches top-1 against the current context embedding,
/// excluding already-selected facts, and appends the winner. The loop stops
/// at the first satisfied criterion: the context reached `max_facts`; the
/// winning score fell below the threshold (winner not appended); an append
/// moved the context embedding by less than epsilon; the append would
/// exceed the token budget (winner not appended); or the index ran out of
/// candidates.
pub fn pursue(
    prompt: &str,
    index: &VectorIndex,
    provider: &dyn EncoderProvider,
    config: &PursuitConfig,
) -> Result<(KnowledgeContext, PursuitTrace)> {
    if index.active_count() == 0 {
        return Err(Error::EmptyIndex);
    }

    let mut facts: Vec<Fact> = Vec::new();
    let mut excluded: HashSet<String> = HashSet::new();
    let mut steps: Vec<PursuitStep> = Vec::new();

    let (mut embedding, _) = context_embedding(prompt, &facts, provider, config.embedding_policy)
        .map_err(|e| Error::PursuitAborted {
        steps: Vec::new(),
        source: Box::new(e),
    })?;

    let stop_reason = loop {
        if facts.len() == config.max_facts {
            break StopReason::MaxSteps;
        }

        let hits = index.search(&embedding, 1, &excluded)?;
        let Some((winner_id, score)) = hits.into_iter().next() else {
            break StopReason::Exhausted;
        };

        if let Some(threshold) = config.relevance_threshold {
            if score < threshold {
                break StopReason::Threshold;
            }
        }

        let winner = index
            .get_fact(&winner_id)
            .expect("search returned an indexed id")
            .clone();

        if let Some(budget) = config.context_token_budget {
            let mut projected = facts.clone();
            projected.push(winner.clone());
            if provider.count_tokens(&serialize_context(prompt, &projected)) > budget {
                break StopReason::Budget;
            }
        }

        excluded.insert(winner_id.clone());
        facts.push(winner);

        // A step completes only once the post-append embedding exists; on a
        // provider failure the pending fact is rolled back so the attached
        // steps always mirror the appended facts.
        let (next_embedding, fallback_used) =
            match context_embedding(prompt, &facts, provider, config.embedding_policy) {
                Ok(v) => v,
                Err(e) => {
                    facts.pop();
                    return Err(Error::PursuitAborted {
                        steps,
                        source: Box::new(e),
                    });
                }
            };
        steps.push(PursuitStep {
            iteration: facts.len(),
            fact_id: winner_id,
            score,
            context_tokens: provider.count_tokens(&serialize_context(prompt, &facts)),
            fallback_used,
        });

        let moved = next_embedding.l2_distance(&embedding)?;
        embedding = next_embedding;
        if let Some(epsilon) = config.convergence_epsilon {
            if moved < epsilon {
                break StopReason::Converged;
            }
        }
    };

    let total_tokens = provider.count_tokens(&serialize_context(prompt, &facts));
    Ok((
        KnowledgeContext {
            prompt: prompt.to_string(),
            facts,
            embedding_state: embedding,
            total_tokens,
        },
        PursuitTrace { steps, stop_reason },
    ))
}

/// One-shot baseline: all top-k facts from a single query against the prompt
/// alone, in score order.
pub fn static_topk(
    prompt: &str,
    index: &VectorIndex,
    provider: &dyn EncoderProvider,
    k: usize,
    policy: EmbeddingPolicy,
) -> Result<KnowledgeContext> {
    if index.active_count() == 0 {
        return Err(Error::EmptyIndex);
    }
    let query = provider.encode(prompt)?;
    let hits = index.search(&query, k, &HashSet::new())?;
    let facts: Vec<Fact> = hits
        .iter()
        .map(|(id, _)| {
            index
                .get_fact(id)
                .expect("search returned an indexed id")
                .clone()
        })
        .collect();
    let (embedding_state, _) = context_embedding(prompt, &facts, provider, policy)?;
    let total_tokens = provider.count_tokens(&serialize_context(prompt, &facts));
    Ok(KnowledgeContext {
        prompt: prompt.to_string(),
        facts,
        embedding_state,
        total_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FactStore;
    use crate::embed::{relevance, HashedBagEncoder};
    use crate::index::VectorIndex;

    /// Chain corpus: `anchor` shares words with the prompt, `bridge` shares
    /// words only with `anchor`, `aside` is unrelated. The `aside` id sorts
    /// before `bridge` so the two tie deterministically when both score zero.
    fn chain_store() -> (String, FactStore) {
        let prompt = "icthyophaga leucogaster".to_string();
        let mut store = FactStore::new(100);
        store
            .add_fact(Fact::new(
                "anchor",
                "",
                "icthyophaga leucogaster names the white bellied sea eagle",
            ))
            .unwrap();
        store
            .add_fact(Fact::new(
                "bridge",
                "",
                "white bellied sea eagle hunts along coastal waters",
            ))
            .unwrap();
        store
            .add_fact(Fact::new(
                "aside",
                "",
                "venetian canal markets flood yearly",
            ))
            .unwrap();
        (prompt, store)
    }

    fn provider() -> HashedBagEncoder {
        HashedBagEncoder::new(4096, 512)
    }

    #[test]
    fn max_facts_zero_is_a_degenerate_run() {
        let (prompt, store) = chain_store();
        let enc = provider();
        let index = VectorIndex::build(&store, &enc).unwrap();
        let config = PursuitConfig {
            max_facts: 0,
            ..PursuitConfig::default()
        };
        let (context, trace) = pursue(&prompt, &index, &enc, &config).unwrap();
        assert!(context.facts.is_empty());
        assert!(trace.steps.is_empty());
        assert_eq!(trace.stop_reason, StopReason::MaxSteps);
        assert_eq!(context.embedding_state, enc.encode(&prompt).unwrap());
    }

    #[test]
    fn single_fact_index_exhausts() {
        let enc = provider();
        let mut store = FactStore::new(100);
        store
            .add_fact(Fact::new("only", "", "icthyophaga leucogaster soars"))
            .unwrap();
        let index = VectorIndex::build(&store, &enc).unwrap();
        let (context, trace) = pursue(
            "icthyophaga leucogaster",
            &index,
            &enc,
            &PursuitConfig::default(),
        )
        .unwrap();
        assert_eq!(context.fact_ids(), vec!["only"]);
        assert_eq!(trace.stop_reason, StopReason::Exhausted);
        assert_eq!(trace.steps.len(), 1);
    }

    /// Step-by-step manual oracle replaying the argmax with test-provider
    /// embeddings: pursuit walks the chain that a static query cannot reach.
    #[test]
    fn planted_chain_is_followed_in_order() {
        let (prompt, store) = chain_store();
        let enc = provider();
        let index = VectorIndex::build(&store, &enc).unwrap();

        // Manual step 1: argmax over all facts against encode(prompt).
        let q0 = enc.encode(&prompt).unwrap();
        let mut scores0: Vec<(&str, f64)> = store
            .facts()
            .iter()
            .map(|f| {
                (
                    f.id.as_str(),
                    relevance(&enc.encode(&f.text).unwrap(), &q0).unwrap(),
                )
            })
            .collect();
        scores0.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
        assert_eq!(scores0[0].0, "anchor");

        // Manual step 2: context is prompt + anchor text, argmax over the rest.
        let ctx1 = format!("{prompt}\n{}", store.get("anchor").unwrap().text);
        let q1 = enc.encode(&ctx1).unwrap();
        let mut scores1: Vec<(&str, f64)> = store
            .facts()
            .iter()
            .filter(|f| f.id != "anchor")
            .map(|f| {
                (
                    f.id.as_str(),
                    relevance(&enc.encode(&f.text).unwrap(), &q1).unwrap(),
                )
            })
            .collect();
        scores1.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
        assert_eq!(scores1[0].0, "bridge");

        let config = PursuitConfig {
            max_facts: 2,
            ..PursuitConfig::default()
        };
        let (context, trace) = pursue(&prompt, &index, &enc, &config).unwrap();
        assert_eq!(context.fact_ids(), vec!["anchor", "bridge"]);
        assert_eq!(trace.stop_reason, StopReason::MaxSteps);
        assert_eq!(trace.steps[0].score, scores0[0].1);
        assert_eq!(trace.steps[1].score, scores1[0].1);
    }

    #[test]
    fn static_topk_cannot_reach_the_bridge() {
        let (prompt, store) = chain_store();
        let enc = provider();
        let index = VectorIndex::build(&store, &enc).unwrap();
        let context = static_topk(&prompt, &index, &enc, 2, EmbeddingPolicy::default()).unwrap();
        let ids = context.fact_ids();
        assert_eq!(ids[0], "anchor");
        assert!(!ids.contains(&"bridge".to_string()));
    }

    #[test]
    fn static_k_beyond_active_count_saturates() {
        let (prompt, store) = chain_store();
        let enc = provider();
        let index = VectorIndex::build(&store, &enc).unwrap();
        let context = static_topk(&prompt, &index, &enc, 50, EmbeddingPolicy::default()).unwrap();
        assert_eq!(context.facts.len(), 3);
    }

    #[test]
    fn first_step_equals_static_top1() {
        let (prompt, store) = chain_store();
        let enc = provider();
        let index = VectorIndex::build(&store, &enc).unwrap();
        let config = PursuitConfig {
            max_facts: 1,
            ..PursuitConfig::default()
        };
        let (pursued, _) = pursue(&prompt, &index, &enc, &config).unwrap();
        let topk = static_topk(&prompt, &index, &enc, 1, EmbeddingPolicy::default()).unwrap();
        assert_eq!(pursued.fact_ids(), topk.fact_ids());
    }

    #[test]
    fn threshold_stops_without_appending() {
        let (prompt, store) = chain_store();
        let enc = provider();
        let index = VectorIndex::build(&store, &enc).unwrap();
        let config = PursuitConfig {
            relevance_threshold: Some(10.0), // nothing scores this high
            ..PursuitConfig::default()
        };
        let (context, trace) = pursue(&prompt, &index, &enc, &config).unwrap();
        assert!(context.facts.is_empty());
        assert_eq!(trace.stop_reason, StopReason::Threshold);
    }

    #[test]
    fn budget_stops_before_the_oversized_append() {
        let (prompt, store) = chain_store();
        let enc = provider();
        let index = VectorIndex::build(&store, &enc).unwrap();
        // Prompt has 2 tokens, anchor has 9: appending anchor costs 11, the
        // next fact would cross 15.
        let config = PursuitConfig {
            context_token_budget: Some(15),
            ..PursuitConfig::default()
        };
        let (context, trace) = pursue(&prompt, &index, &enc, &config).unwrap();
        assert_eq!(context.fact_ids(), vec!["anchor"]);
        assert_eq!(trace.stop_reason, StopReason::Budget);
        assert!(context.total_tokens <= 15);
    }

    #[test]
    fn convergence_stops_when_the_embedding_settles() {
        let enc = provider();
        let mut store = FactStore::new(100);
        // Every fact repeats the prompt word, so the context embedding is the
        // same unit vector after every append.
        for i in 0..4 {
            store
                .add_fact(Fact::new(format!("r{i}"), "", "echo"))
                .unwrap();
        }
        let index = VectorIndex::build(&store, &enc).unwrap();
        let config = PursuitConfig {
            convergence_epsilon: Some(1e-9),
            ..PursuitConfig::default()
        };
        let (context, trace) = pursue("echo", &index, &enc, &config).unwrap();
        assert_eq!(context.facts.len(), 1);
        assert_eq!(trace.stop_reason, StopReason::Converged);
    }

    #[test]
    fn no_duplicate_selections_and_monotone_context() {
        let (prompt, store) = chain_store();
        let enc = provider();
        let index = VectorIndex::build(&store, &enc).unwrap();
        let (context, trace) = pursue(&prompt, &index, &enc, &PursuitConfig::default()).unwrap();
        let ids = context.fact_ids();
        let unique: HashSet<&String> = ids.iter().collect();
        assert_eq!(unique.len(), ids.len());
        assert_eq!(trace.steps.len(), ids.len());
        for (i, step) in trace.steps.iter().enumerate() {
            assert_eq!(step.iteration, i + 1);
            assert_eq!(step.fact_id, ids[i]);
        }
    }

    #[test]
    fn sessions_do_not_mutate_the_shared_index() {
        let (prompt, store) = chain_store();
        let enc = provider();
        let index = VectorIndex::build(&store, &enc).unwrap();
        let before = index.active_count();
        let (a, _) = pursue(&prompt, &index, &enc, &PursuitConfig::default()).unwrap();
        let (b, _) = pursue(&prompt, &index, &enc, &PursuitConfig::default()).unwrap();
        assert_eq!(index.active_count(), before);
        assert_eq!(a.fact_ids(), b.fact_ids());
    }

    #[test]
    fn concurrent_pursuits_share_one_index() {
        use std::sync::Arc;

        let (prompt, store) = chain_store();
        let enc = Arc::new(provider());
        let index = Arc::new(VectorIndex::build(&store, enc.as_ref()).unwrap());
        let expected = pursue(&prompt, &index, enc.as_ref(), &PursuitConfig::default())
            .unwrap()
            .0
            .fact_ids();

        let handles: Vec<_> = (0..8)
            .map(|_| {
                let index = index.clone();
                let enc = enc.clone();
                let prompt = prompt.clone();
                std::thread::spawn(move || {
                    pursue(&prompt, &index, enc.as_ref(), &PursuitConfig::default())
                        .unwrap()
                        .0
                        .fact_ids()
                })
            })
            .collect();
        for handle in handles {
            assert_eq!(handle.join().unwrap(), expected);
        }
    }

    #[test]
    fn empty_index_errors() {
        let enc = provider();
        let mut index = VectorIndex::new(4096, "test");
        index
            .insert(Fact::new("a", "", "x"), enc.encode("x").unwrap())
            .unwrap();
        index.remove("a").unwrap();
        assert!(matches!(
            pursue("prompt", &index, &enc, &PursuitConfig::default()),
            Err(Error::EmptyIndex)
        ));
    }

    /// Encoder that starts failing after a set number of encode calls.
    struct FlakyEncoder {
        inner: HashedBagEncoder,
        fail_after: usize,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl EncoderProvider for FlakyEncoder {
        fn name(&self) -> &str {
            "flaky"
        }
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn max_tokens(&self) -> usize {
            self.inner.max_tokens()
        }
        fn language_mode(&self) -> crate::embed::LanguageMode {
            self.inner.language_mode()
        }
        fn count_tokens(&self, text: &str) -> usize {
            self.inner.count_tokens(text)
        }
        fn encode(&self, text: &str) -> crate::error::Result<Embedding> {
            let n = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if n >= self.fail_after {
                return Err(Error::Transport {
                    endpoint: "test".into(),
                    message: "injected failure".into(),
                });
            }
            self.inner.encode(text)
        }
    }

    #[test]
    fn transport_failure_aborts_with_completed_steps() {
        let (prompt, store) = chain_store();
        let good = provider();
        let index = VectorIndex::build(&store, &good).unwrap();
        // Call 1 embeds C_0, call 2 closes step 1, call 3 (closing step 2)
        // fails.
        let flaky = FlakyEncoder {
            inner: provider(),
            fail_after: 2,
            calls: std::sync::atomic::AtomicUsize::new(0),
        };
        match pursue(&prompt, &index, &flaky, &PursuitConfig::default()) {
            Err(Error::PursuitAborted { steps, source }) => {
                assert_eq!(steps.len(), 1);
                assert_eq!(steps[0].fact_id, "anchor");
                assert!(matches!(*source, Error::Transport { .. }));
            }
            other => panic!("expected aborted pursuit, got {other:?}"),
        }
    }

    #[test]
    fn base_case_embedding_is_the_prompt_embedding() {
        let enc = provider();
        let (embedding, fallback) =
            context_embedding("the prompt", &[], &enc, EmbeddingPolicy::ConcatThenEncode).unwrap();
        assert_eq!(embedding, enc.encode("the prompt").unwrap());
        assert!(!fallback);
    }

    #[test]
    fn concat_embedding_matches_hand_built_concatenation() {
        let enc = provider();
        let facts = vec![
            Fact::new("a", "", "first fact text"),
            Fact::new("b", "", "second fact text"),
        ];
        let (embedding, fallback) = context_embedding(
            "prompt words",
            &facts,
            &enc,
            EmbeddingPolicy::ConcatThenEncode,
        )
        .unwrap();
        assert!(!fallback);
        let by_hand = enc
            .encode("prompt words\nfirst fact text\nsecond fact text")
            .unwrap();
        assert_eq!(embedding, by_hand);
    }

    #[test]
    fn over_limit_context_falls_back_to_member_centroid() {
        let enc = HashedBagEncoder::new(64, 6);
        let facts = vec![
            Fact::new("a", "", "one two three four"),
            Fact::new("b", "", "five six seven eight"),
        ];
        let (embedding, fallback) = context_embedding(
            "prompt words",
            &facts,
            &enc,
            EmbeddingPolicy::ConcatThenEncode,
        )
        .unwrap();
        assert!(fallback);
        let members = vec![
            enc.encode("prompt words").unwrap(),
            enc.encode("one two three four").unwrap(),
            enc.encode("five six seven eight").unwrap(),
        ];
        let expected = centroid(&members).unwrap();
        for (a, b) in embedding.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
