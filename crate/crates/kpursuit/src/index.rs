//! Exact flat vector index over fact embeddings.
//!
//! Search scans every active entry and returns exact top-k results by inner
//! product, with ties broken by lexicographically smallest fact id so that
//! argmax is well-defined and traces are reproducible. Removal is a tombstone;
//! per-session exclusion sets let concurrent pursuits share one immutable
//! index (see the pursuit module).
//!
//! An optional partitioned mode ([`Partitions`]) trades exactness for speed on
//! large corpora by probing only the nearest inverted lists; everything built
//! for acceptance runs exact flat search.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::{Fact, FactStore};
use crate::embed::{encode_with_split_fallback, relevance, Embedding, EncoderProvider};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KPIDX001";

/// One indexed fact with its embedding.
#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub fact: Fact,
    pub embedding: Embedding,
    removed: bool,
}

/// Facts whose text exceeded the provider token limit at build time and were
/// embedded as the centroid of their sentence embeddings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildDiagnostics {
    pub split_fallback_ids: Vec<String>,
}

/// Build-time knobs.
#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// Prepend the source document title to the block text before embedding.
    /// Off by default: block text alone is what gets embedded.
    pub prepend_title: bool,
}

/// Searchable map from fact id to embedding with dynamic exclusion and
/// removal.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    provider_name: String,
    provider_max_tokens: usize,
    entries: Vec<IndexEntry>,
    by_id: HashMap<String, usize>,
    active_count: usize,
    diagnostics: BuildDiagnostics,
}

impl VectorIndex {
    pub fn new(dim: usize, provider_name: impl Into<String>) -> VectorIndex {
        assert!(dim > 0, "dim must be positive");
        VectorIndex {
            dim,
            provider_name: provider_name.into(),
            provider_max_tokens: 512,
            entries: Vec::new(),
            by_id: HashMap::new(),
            active_count: 0,
            diagnostics: BuildDiagnostics::default(),
        }
    }

    /// Embed and index every fact of a store.
    ///
    /// Over-long facts fall back to sentence-centroid embeddings and are
    /// flagged in [`VectorIndex::diagnostics`]. A provider failure aborts the
    /// build with a partial-progress report.
    pub fn build(store: &FactStore, provider: &dyn EncoderProvider) -> Result<VectorIndex> {
        VectorIndex::build_with_options(store, provider, &BuildOptions::default())
    }

    /// [`VectorIndex::build`] with knobs.
    pub fn build_with_options(
        store: &FactStore,
        provider: &dyn EncoderProvider,
        options: &BuildOptions,
    ) -> Result<VectorIndex> {
        if store.is_empty() {
            return Err(Error::EmptyStore);
        }
        let mut index = VectorIndex::new(provider.dim(), provider.name());
        index.provider_max_tokens = provider.max_tokens();
        let total = store.len();
        for (i, fact) in store.facts().iter().enumerate() {
            let embed_text: std::borrow::Cow<'_, str> =
                if options.prepend_title && !fact.title.is_empty() {
                    format!("{}\n{}", fact.title, fact.text).into()
                } else {
                    fact.text.as_str().into()
                };
            let (embedding, fell_back) = encode_with_split_fallback(provider, &embed_text)
                .map_err(|e| Error::BuildAborted {
                    embedded: i,
                    total,
                    source: Box::new(e),
                })?;
            if fell_back {
                index.diagnostics.split_fallback_ids.push(fact.id.clone());
            }
            index.insert(fact.clone(), embedding)?;
        }
        Ok(index)
    }

    /// Insert one entry. The embedding dimension must match the index.
    pub fn insert(&mut self, fact: Fact, embedding: Embedding) -> Result<()> {
        if embedding.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: embedding.dim(),
            });
        }
        if self.by_id.contains_key(&fact.id) {
            return Err(Error::DuplicateFactId(fact.id));
        }
        self.by_id.insert(fact.id.clone(), self.entries.len());
        self.entries.push(IndexEntry {
            fact,
            embedding,
            removed: false,
        });
        self.active_count += 1;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Name of the provider the index was built with; embeddings are not
    /// reusable across providers.
    pub fn provider_name(&self) -> &str {
        &self.provider_name
    }

    /// Token limit of the provider the index was built with, kept so tools
    /// loading the index can reconstruct an equivalent provider.
    pub fn provider_max_tokens(&self) -> usize {
        self.provider_max_tokens
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    pub fn diagnostics(&self) -> &BuildDiagnostics {
        &self.diagnostics
    }

    pub fn get_fact(&self, id: &str) -> Option<&Fact> {
        self.by_id.get(id).map(|&i| &self.entries[i].fact)
    }

    pub fn get_embedding(&self, id: &str) -> Option<&Embedding> {
        self.by_id.get(id).map(|&i| &self.entries[i].embedding)
    }

    /// Active (non-removed) entries, in insertion order.
    pub fn iter_active(&self) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(|e| !e.removed)
    }

    /// Exact top-k by inner product over active, non-excluded entries.
    ///
    /// Scores are non-increasing; ties broken by smallest fact id.
    pub fn search(
        &self,
        query: &Embedding,
        k: usize,
        excluded: &HashSet<String>,
    ) -> Result<Vec<(String, f64)>> {
        if k < 1 {
            return Err(Error::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: query.dim(),
            });
        }
        let mut scored: Vec<(&str, f64)> = Vec::new();
        for entry in self.iter_active() {
            if excluded.contains(&entry.fact.id) {
                continue;
            }
            let score = relevance(&entry.embedding, query)?;
            scored.push((&entry.fact.id, score));
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite scores")
                .then_with(|| a.0.cmp(b.0))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(id, s)| (id.to_string(), s))
            .collect())
    }

    /// Tombstone an entry so it is never returned by later searches.
    pub fn remove(&mut self, id: &str) -> Result<()> {
        let &pos = self
            .by_id
            .get(id)
            .ok_or_else(|| Error::UnknownFactId(id.to_string()))?;
        let entry = &mut self.entries[pos];
        if entry.removed {
            return Err(Error::AlreadyRemoved(id.to_string()));
        }
        entry.removed = true;
        self.active_count -= 1;
        Ok(())
    }

    /// Write the index as a binary file: magic, dim, provider name, then one
    /// record per active entry (id, title, text, little-endian f64 vector).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, self.dim as u32)?;
        write_str(&mut w, &self.provider_name)?;
        write_u32(&mut w, self.provider_max_tokens as u32)?;
        write_u64(&mut w, self.active_count as u64)?;
        for entry in self.iter_active() {
            write_str(&mut w, &entry.fact.id)?;
            write_str(&mut w, &entry.fact.title)?;
            write_str(&mut w, &entry.fact.text)?;
            for &x in entry.embedding.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        write_u64(&mut w, self.diagnostics.split_fallback_ids.len() as u64)?;
        for id in &self.diagnostics.split_fallback_ids {
            write_str(&mut w, id)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<VectorIndex> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::MalformedIndex("bad magic".into()));
        }
        let dim = read_u32(&mut r)? as usize;
        if dim == 0 {
            return Err(Error::MalformedIndex("zero dimension".into()));
        }
        let provider_name = read_str(&mut r)?;
        let provider_max_tokens = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let mut index = VectorIndex::new(dim, provider_name);
        index.provider_max_tokens = provider_max_tokens;
        for _ in 0..count {
            let id = read_str(&mut r)?;
            let title = read_str(&mut r)?;
            let text = read_str(&mut r)?;
            let mut vector = Vec::with_capacity(dim);
            let mut buf = [0u8; 8];
            for _ in 0..dim {
                r.read_exact(&mut buf)?;
                vector.push(f64::from_le_bytes(buf));
            }
            let embedding = Embedding::new(vector)
                .map_err(|e| Error::MalformedIndex(format!("entry {id}: {e}")))?;
            index.insert(Fact::new(id, title, text), embedding)?;
        }
        let diag_count = read_u64(&mut r)? as usize;
        for _ in 0..diag_count {
            index.diagnostics.split_fallback_ids.push(read_str(&mut r)?);
        }
        Ok(index)
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::MalformedIndex(e.to_string()))
}

/// Inverted-list partitioning for large corpora.
///
/// Entries are assigned to the nearest of `n_partitions` centroids (built by
/// a few k-means passes); a query probes the `n_probe` nearest lists. Same
/// query semantics as flat search but approximate: recall depends on
/// `n_probe`.
#[derive(Debug, Clone)]
pub struct Partitions {
    centroids: Vec<Embedding>,
    assignments: Vec<Vec<usize>>,
    n_probe: usize,
}

impl Partitions {
    pub fn build(index: &VectorIndex, n_partitions: usize, n_probe: usize) -> Result<Partitions> {
        if index.active_count() == 0 {
            return Err(Error::EmptyIndex);
        }
        let n_partitions = n_partitions.clamp(1, index.active_count());
        let active: Vec<usize> = index
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.removed)
            .map(|(i, _)| i)
            .collect();

        // Deterministic seeding: evenly spaced active entries.
        let mut centroids: Vec<Embedding> = (0..n_partitions)
            .map(|p| {
                index.entries[active[p * active.len() / n_partitions]]
                    .embedding
                    .clone()
            })
            .collect();

        let mut assignments = vec![Vec::new(); n_partitions];
        for _round in 0..4 {
            for list in &mut assignments {
                list.clear();
            }
            for &i in &active {
                let part = nearest_centroid(&centroids, &index.entries[i].embedding)?;
                assignments[part].push(i);
            }
            for (p, list) in assignments.iter().enumerate() {
                if list.is_empty() {
                    continue;
                }
                let members: Vec<Embedding> = list
                    .iter()
                    .map(|&i| index.entries[i].embedding.clone())
                    .collect();
                centroids[p] = crate::embed::centroid(&members)?;
            }
        }

        Ok(Partitions {
            centroids,
            assignments,
            n_probe: n_probe.max(1),
        })
    }

    /// Top-k over the `n_probe` partitions nearest to the query.
    pub fn search(
        &self,
        index: &VectorIndex,
        query: &Embedding,
        k: usize,
        excluded: &HashSet<String>,
    ) -> Result<Vec<(String, f64)>> {
        if k < 1 {
            return Err(Error::InvalidK);
        }
        let mut by_dist: Vec<(usize, f64)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(p, c)| Ok((p, relevance(c, query)?)))
            .collect::<Result<Vec<_>>>()?;
        by_dist.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));

        let mut scored: Vec<(&str, f64)> = Vec::new();
        for &(p, _) in by_dist.iter().take(self.n_probe) {
            for &i in &self.assignments[p] {
                let entry = &index.entries[i];
                if entry.removed || excluded.contains(&entry.fact.id) {
                    continue;
                }
                scored.push((&entry.fact.id, relevance(&entry.embedding, query)?));
            }
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite scores")
                .then_with(|| a.0.cmp(b.0))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(id, s)| (id.to_string(), s))
            .collect())
    }
}

fn nearest_centroid(centroids: &[Embedding], e: &Embedding) -> Result<usize> {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (p, c) in centroids.iter().enumerate() {
        let s = relevance(c, e)?;
        if s > best_score {
            best = p;
            best_score = s;
        }
    }
    Ok(best)
}
