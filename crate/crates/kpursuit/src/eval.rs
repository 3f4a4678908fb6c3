//! Retrieval-strategy benchmark harness.
//!
//! Compares three ways of grounding a QA task against one knowledge base:
//! recursive pursuit, static top-k, and a posterior-ensemble baseline that
//! answers with a retrieval-score-weighted mixture of per-fact answer
//! distributions. Tasks are synthetic and the answerer is typically the
//! containment oracle, which is correct exactly when a gold fact made it
//! into the context — this isolates the retrieval mechanism from language
//! model quality.
//!
//! The planted-chain generator builds corpora where the gold fact shares
//! vocabulary with a bridge fact but not with the question, so only a
//! context-aware strategy can reach it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Fact, FactStore};
use crate::embed::{relevance, EncoderProvider};
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::pursuit::{pursue, static_topk, EmbeddingPolicy, KnowledgeContext, PursuitConfig};

/// One multiple-choice task with the fact ids sufficient to answer it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QATask {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub gold_index: usize,
    pub gold_fact_ids: BTreeSet<String>,
    #[serde(default)]
    pub subject: Option<String>,
}

/// Answers tasks from retrieved evidence.
pub trait Answerer: Send + Sync {
    /// Choose an answer given an assembled knowledge context.
    fn answer_with_context(&self, context: &KnowledgeContext, task: &QATask) -> Result<usize>;
    /// Probability over choices conditioned on a single fact.
    fn choice_posterior(&self, fact: &Fact, task: &QATask) -> Result<Vec<f64>>;
}

/// Deterministic oracle: correct iff any gold fact is present.
///
/// With a context containing a gold fact it returns the gold index; otherwise
/// a fixed wrong answer. Per-fact posteriors are one-hot on the gold choice
/// for gold facts and uniform (uninformative) for everything else.
pub struct ContainmentOracle;

impl Answerer for ContainmentOracle {
    fn answer_with_context(&self, context: &KnowledgeContext, task: &QATask) -> Result<usize> {
        let has_gold = context
            .facts
            .iter()
            .any(|f| task.gold_fact_ids.contains(&f.id));
        if has_gold {
            Ok(task.gold_index)
        } else {
            Ok((task.gold_index + 1) % task.choices.len().max(1))
        }
    }

    fn choice_posterior(&self, fact: &Fact, task: &QATask) -> Result<Vec<f64>> {
        let n = task.choices.len().max(1);
        if task.gold_fact_ids.contains(&fact.id) {
            let mut p = vec![0.0; n];
            p[task.gold_index] = 1.0;
            Ok(p)
        } else {
            Ok(vec![1.0 / n as f64; n])
        }
    }
}

/// Which retrieval strategy a benchmark column runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Pursue,
    Static,
    Replug,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<StrategyKind> {
        match s {
            "pursue" => Ok(StrategyKind::Pursue),
            "static" => Ok(StrategyKind::Static),
            "replug" => Ok(StrategyKind::Replug),
            other => Err(Error::Config(format!("unknown strategy: {other}"))),
        }
    }
}

/// One benchmark column: a strategy and its knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub label: String,
    pub kind: StrategyKind,
    /// Context size: `max_facts` for pursue, `k` for static and replug.
    pub k: usize,
    pub pursuit: PursuitConfig,
    /// Softmax temperature for replug weights.
    pub temperature: f64,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, k: usize) -> StrategyConfig {
        let label = match kind {
            StrategyKind::Pursue => "pursue",
            StrategyKind::Static => "static",
            StrategyKind::Replug => "replug",
        };
        StrategyConfig {
            label: label.to_string(),
            kind,
            k,
            pursuit: PursuitConfig {
                max_facts: k,
                ..PursuitConfig::default()
            },
            temperature: 1.0,
        }
    }
}

/// Outcome of one (task, strategy) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub task_id: String,
    pub strategy: String,
    pub selected_fact_ids: Vec<String>,
    pub answer: Option<usize>,
    pub correct: bool,
    pub skipped: bool,
}

/// Aggregated numbers for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: String,
    pub correct: usize,
    pub total: usize,
    pub skipped: usize,
    /// Mean Jaccard overlap of selected fact-id sets across task pairs: how
    /// much the strategy retrieves the same facts regardless of question.
    pub mean_context_overlap: f64,
    /// Mean inner product over fact pairs within a context, averaged across
    /// tasks with at least two facts.
    pub mean_pairwise_similarity: f64,
    /// `1 - mean_pairwise_similarity`, clamped to [0, 1].
    pub diversity: f64,
}

/// The full benchmark result: per-strategy numbers plus per-task traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategies: Vec<StrategyReport>,
    pub traces: Vec<TaskTrace>,
}

impl EvalReport {
    pub fn strategy(&self, label: &str) -> Option<&StrategyReport> {
        self.strategies.iter().find(|s| s.strategy == label)
    }

    /// Accuracy of one strategy in [0, 1].
    pub fn accuracy(&self, label: &str) -> Option<f64> {
        self.strategy(label)
            .map(|s| s.correct as f64 / s.total.max(1) as f64)
    }

    /// Text table: one row per subject plus a total row, one column per
    /// strategy, cells as `correct/total`.
    pub fn summary_table(&self, tasks: &[QATask]) -> String {
        let subject_of: BTreeMap<&str, &str> = tasks
            .iter()
            .map(|t| (t.id.as_str(), t.subject.as_deref().unwrap_or("all")))
            .collect();
        let mut subjects: Vec<&str> = subject_of.values().copied().collect();
        subjects.sort_unstable();
        subjects.dedup();

        let labels: Vec<&str> = self
            .strategies
            .iter()
            .map(|s| s.strategy.as_str())
            .collect();
        let mut rows = Vec::new();
        let header = {
            let mut h = format!("{:<18}", "subject");
            for l in &labels {
                h.push_str(&format!("{l:>12}"));
            }
            h
        };
        rows.push(header);

        let cell = |label: &str, subject: Option<&str>| -> String {
            let (mut correct, mut total) = (0usize, 0usize);
            for tr in &self.traces {
                if tr.strategy != label {
                    continue;
                }
                if let Some(subj) = subject {
                    if subject_of.get(tr.task_id.as_str()).copied() != Some(subj) {
                        continue;
                    }
                }
                total += 1;
                if tr.correct {
                    correct += 1;
                }
            }
            format!("{correct}/{total}")
        };

        for subj in &subjects {
            let mut row = format!("{subj:<18}");
            for l in &labels {
                row.push_str(&format!("{:>12}", cell(l, Some(subj))));
            }
            rows.push(row);
        }
        let mut total_row = format!("{:<18}", "total");
        for l in &labels {
            total_row.push_str(&format!("{:>12}", cell(l, None)));
        }
        rows.push(total_row);
        rows.join("\n")
    }
}

/// Softmax-weighted mixture of per-fact posteriors.
pub fn replug_mix(scores: &[f64], posteriors: &[Vec<f64>], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() || scores.len() != posteriors.len() {
        return Err(Error::Config(format!(
            "{} scores vs {} posteriors",
            scores.len(),
            posteriors.len()
        )));
    }
    let n = posteriors[0].len();
    if posteriors.iter().any(|p| p.len() != n) {
        return Err(Error::Config("ragged posteriors".to_string()));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    let mut mix = vec![0.0; n];
    for (w, p) in exps.iter().zip(posteriors) {
        for (m, x) in mix.iter_mut().zip(p) {
            *m += (w / z) * x;
        }
    }
    Ok(mix)
}

/// Index of the maximum, ties to the lowest index.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Answer one task by ensembling per-fact posteriors from a single static
/// top-k retrieval, weighted by the softmax of retrieval scores.
///
/// Returns the chosen answer index and the retrieved fact ids.
pub fn replug_ensemble(
    task: &QATask,
    index: &VectorIndex,
    provider: &dyn EncoderProvider,
    answerer: &dyn Answerer,
    k: usize,
    temperature: f64,
) -> Result<(usize, Vec<String>)> {
    let query = provider.encode(&task.question)?;
    let hits = index.search(&query, k, &HashSet::new())?;
    if hits.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut scores = Vec::with_capacity(hits.len());
    let mut posteriors = Vec::with_capacity(hits.len());
    let mut ids = Vec::with_capacity(hits.len());
    for (id, score) in &hits {
        let fact = index.get_fact(id).expect("search returned an indexed id");
        posteriors.push(answerer.choice_posterior(fact, task)?);
        scores.push(*score);
        ids.push(id.clone());
    }
    let mix = replug_mix(&scores, &posteriors, temperature)?;
    Ok((argmax_lowest(&mix), ids))
}

/// Run every strategy over every task and aggregate.
///
/// Strategy failures on a task are recorded as skips, not crashes. Tasks are
/// processed in ascending id order so reruns fold identically.
pub fn run_benchmark(
    tasks: &[QATask],
    strategies: &[StrategyConfig],
    index: &VectorIndex,
    provider: &dyn EncoderProvider,
    answerer: &dyn Answerer,
) -> Result<EvalReport> {
    let mut ordered: Vec<&QATask> = tasks.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let mut traces = Vec::new();
    let mut reports = Vec::new();

    for strategy in strategies {
        let mut correct = 0usize;
        let mut skipped = 0usize;
        let mut selections: Vec<Vec<String>> = Vec::new();

        for task in &ordered {
            let outcome: Result<(usize, Vec<String>)> = match strategy.kind {
                StrategyKind::Pursue => {
                    let mut config = strategy.pursuit.clone();
                    config.max_facts = strategy.k;
                    pursue(&task.question, index, provider, &config).and_then(
                        |(context, _trace)| {
                            let answer = answerer.answer_with_context(&context, task)?;
                            Ok((answer, context.fact_ids()))
                        },
                    )
                }
                StrategyKind::Static => static_topk(
                    &task.question,
                    index,
                    provider,
                    strategy.k,
                    EmbeddingPolicy::default(),
                )
                .and_then(|context| {
                    let answer = answerer.answer_with_context(&context, task)?;
                    Ok((answer, context.fact_ids()))
                }),
                StrategyKind::Replug => replug_ensemble(
                    task,
                    index,
                    provider,
                    answerer,
                    strategy.k,
                    strategy.temperature,
                ),
            };

            match outcome {
                Ok((answer, ids)) => {
                    let is_correct = answer == task.gold_index;
                    if is_correct {
                        correct += 1;
                    }
                    selections.push(ids.clone());
                    traces.push(TaskTrace {
                        task_id: task.id.clone(),
                        strategy: strategy.label.clone(),
                        selected_fact_ids: ids,
                        answer: Some(answer),
                        correct: is_correct,
                        skipped: false,
                    });
                }
                Err(_) => {
                    skipped += 1;
                    selections.push(Vec::new());
                    traces.push(TaskTrace {
                        task_id: task.id.clone(),
                        strategy: strategy.label.clone(),
                        selected_fact_ids: Vec::new(),
                        answer: None,
                        correct: false,
                        skipped: true,
                    });
                }
            }
        }

        let mean_pairwise_similarity = mean_within_context_similarity(&selections, index)?;
        reports.push(StrategyReport {
            strategy: strategy.label.clone(),
            correct,
            total: ordered.len(),
            skipped,
            mean_context_overlap: mean_jaccard_overlap(&selections),
            mean_pairwise_similarity,
            diversity: (1.0 - mean_pairwise_similarity).clamp(0.0, 1.0),
        });
    }

    Ok(EvalReport {
        strategies: reports,
        traces,
    })
}

fn mean_within_context_similarity(selections: &[Vec<String>], index: &VectorIndex) -> Result<f64> {
    let mut task_means = Vec::new();
    for ids in selections {
        if ids.len() < 2 {
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                let a = index
                    .get_embedding(&ids[i])
                    .ok_or_else(|| Error::UnknownFactId(ids[i].clone()))?;
                let b = index
                    .get_embedding(&ids[j])
                    .ok_or_else(|| Error::UnknownFactId(ids[j].clone()))?;
                sum += relevance(a, b)?;
                pairs += 1;
            }
        }
        task_means.push(sum / pairs as f64);
    }
    if task_means.is_empty() {
        return Ok(0.0);
    }
    Ok(task_means.iter().sum::<f64>() / task_means.len() as f64)
}

fn mean_jaccard_overlap(selections: &[Vec<String>]) -> f64 {
    let sets: Vec<BTreeSet<&String>> = selections.iter().map(|s| s.iter().collect()).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            let inter = sets[i].intersection(&sets[j]).count();
            let union = sets[i].union(&sets[j]).count();
            if union > 0 {
                sum += inter as f64 / union as f64;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Read tasks from a JSON Lines file, one task per line.
pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<QATask>> {
    let reader = BufReader::new(File::open(path)?);
    let mut tasks = Vec::new();
    for (offset, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: QATask = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: offset + 1,
            message: e.to_string(),
        })?;
        tasks.push(task);
    }
    Ok(tasks)
}

/// Builders for synthetic planted-chain corpora.
pub mod synthetic {
    use super::*;

    /// Shape of a planted-chain benchmark.
    #[derive(Debug, Clone)]
    pub struct ChainBenchmark {
        pub tasks: usize,
        /// Hops from the question to the gold fact. Depth 1 means the gold
        /// fact shares vocabulary with the question directly.
        pub chain_depth: usize,
        pub distractors_per_task: usize,
    }

    impl Default for ChainBenchmark {
        fn default() -> ChainBenchmark {
            ChainBenchmark {
                tasks: 50,
                chain_depth: 2,
                distractors_per_task: 2,
            }
        }
    }

    impl ChainBenchmark {
        /// Build the fact store and task list.
        ///
        /// For task `t`, fact `j` of the chain carries the vocabulary of
        /// links `j-1` and `j`; link 0 is the question vocabulary. Only the
        /// deepest fact is gold, so a strategy must hop `chain_depth` times
        /// to be judged correct by the containment oracle. Distractor facts
        /// share vocabulary with nothing. Everything is deterministic in the
        /// task number, so a given shape always produces the same corpus.
        pub fn build(&self) -> (FactStore, Vec<QATask>) {
            assert!(self.chain_depth >= 1, "chain_depth must be at least 1");
            let mut store = FactStore::new(crate::corpus::DEFAULT_BLOCK_SIZE);
            let mut tasks = Vec::with_capacity(self.tasks);
            let subjects = ["synthetic-a", "synthetic-b", "synthetic-c", "synthetic-d"];
            let choices: Vec<String> = [
                "a coastal raptor",
                "a canal bridge",
                "a pancake dish",
                "a pine forest",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();

            for t in 0..self.tasks {
                let link_tokens = |link: usize| -> Vec<String> {
                    (0..3).map(|w| format!("tok{t:03}x{link}x{w}")).collect()
                };

                let question = link_tokens(0).join(" ");
                let mut gold_id = String::new();
                for j in 1..=self.chain_depth {
                    let mut words = link_tokens(j - 1);
                    words.extend(link_tokens(j));
                    let id = format!("t{t:03}-link{j}");
                    if j == self.chain_depth {
                        gold_id = id.clone();
                    }
                    store
                        .add_fact(Fact::new(id, "chain", words.join(" ")))
                        .expect("synthetic ids are unique");
                }
                for d in 0..self.distractors_per_task {
                    let words: Vec<String> =
                        (0..6).map(|w| format!("noise{t:03}x{d}x{w}")).collect();
                    store
                        .add_fact(Fact::new(
                            format!("t{t:03}-noise{d}"),
                            "noise",
                            words.join(" "),
                        ))
                        .expect("synthetic ids are unique");
                }

                tasks.push(QATask {
                    id: format!("task-{t:03}"),
                    question,
                    choices: choices.clone(),
                    gold_index: t % choices.len(),
                    gold_fact_ids: BTreeSet::from([gold_id]),
                    subject: Some(subjects[t % subjects.len()].to_string()),
                });
            }
            (store, tasks)
        }
    }
}
