//! Text encoders and inner-product relevance.
//!
//! An [`EncoderProvider`] maps token sequences to vectors in `R^p`. Relevance
//! between two embeddings is their raw inner product: it is symmetric and
//! bilinear but, for arbitrary vectors, not necessarily non-negative. The
//! bundled [`HashedBagEncoder`] produces vectors with non-negative components,
//! so relevance scores between its outputs are always >= 0; remote encoders
//! make no such guarantee and we deliberately do not clamp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A vector in `R^p` with all components finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    vector: Vec<f64>,
}

impl Embedding {
    /// Wrap a raw vector, rejecting empty and non-finite inputs.
    pub fn new(vector: Vec<f64>) -> Result<Embedding> {
        if vector.is_empty() {
            return Err(Error::DimensionMismatch { left: 0, right: 0 });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteEmbedding);
        }
        Ok(Embedding { vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    /// L2 norm of the difference, used by the pursuit convergence stop.
    pub fn l2_distance(&self, other: &Embedding) -> Result<f64> {
        check_dims(self, other)?;
        Ok(self
            .vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Scale to unit L2 norm. Zero vectors are left untouched.
    pub fn l2_normalized(mut self) -> Embedding {
        let norm = self.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut self.vector {
                *x /= norm;
            }
        }
        self
    }
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Inner-product relevance between two same-dimension embeddings.
pub fn relevance(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum())
}

/// Componentwise arithmetic mean of a nonempty list of embeddings.
pub fn centroid(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings.first().ok_or(Error::EmptyEmbeddingList)?;
    let dim = first.dim();
    let mut acc = vec![0.0f64; dim];
    for e in embeddings {
        if e.dim() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: e.dim(),
            });
        }
        for (a, x) in acc.iter_mut().zip(&e.vector) {
            *a += x;
        }
    }
    let n = embeddings.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Embedding::new(acc)
}

/// Whether a provider's encoder was trained for one language or many.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageMode {
    Monolingual,
    Multilingual,
}

/// A text encoder with a fixed output dimension and a per-request token limit.
///
/// Encoding must be deterministic for a fixed provider configuration.
pub trait EncoderProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn max_tokens(&self) -> usize;
    fn language_mode(&self) -> LanguageMode;

    /// Token count under this provider's counting rule.
    fn count_tokens(&self, text: &str) -> usize;

    /// Encode one text. Errors with [`Error::OverLength`] when the text
    /// exceeds `max_tokens`; callers that may hold over-long text should go
    /// through [`encode_with_split_fallback`].
    fn encode(&self, text: &str) -> Result<Embedding>;

    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.encode(t)).collect()
    }
}

/// 64-bit FNV-1a hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// splitmix64 finalizer. FNV-1a alone has weak avalanche in its low bits,
/// and bucket counts are taken modulo power-of-two dimensions, so the hash
/// is mixed before reduction.
pub fn mix64(mut h: u64) -> u64 {
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// Deterministic offline encoder: a bag of hashed words.
///
/// Construction, exactly: split the text on whitespace; lowercase each word;
/// increment bucket `mix64(fnv1a64(word_bytes)) % dim`; L2-normalize the
/// resulting count vector. Tokens are whitespace words. All components are
/// non-negative, so inner products of its outputs are non-negative, and texts
/// sharing words get correlated embeddings regardless of capitalization.
#[derive(Debug, Clone)]
pub struct HashedBagEncoder {
    dim: usize,
    max_tokens: usize,
    language_mode: LanguageMode,
}

impl HashedBagEncoder {
    pub fn new(dim: usize, max_tokens: usize) -> HashedBagEncoder {
        assert!(dim > 0, "dim must be positive");
        HashedBagEncoder {
            dim,
            max_tokens,
            language_mode: LanguageMode::Monolingual,
        }
    }

    /// The encoder hashes bytes, not language-specific tokens, so it can be
    /// registered as the multilingual querier in tests.
    pub fn multilingual(mut self) -> HashedBagEncoder {
        self.language_mode = LanguageMode::Multilingual;
        self
    }

    /// Bucket index for one word under this encoder's dimension. Words are
    /// lowercased before hashing.
    pub fn bucket(&self, word: &str) -> usize {
        (mix64(fnv1a64(word.to_lowercase().as_bytes())) % self.dim as u64) as usize
    }
}

impl EncoderProvider for HashedBagEncoder {
    fn name(&self) -> &str {
        "test"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn language_mode(&self) -> LanguageMode {
        self.language_mode
    }

    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn encode(&self, text: &str) -> Result<Embedding> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::EmptyText);
        }
        if words.len() > self.max_tokens {
            return Err(Error::OverLength {
                tokens: words.len(),
                max_tokens: self.max_tokens,
            });
        }
        let mut counts = vec![0.0f64; self.dim];
        for word in words {
            counts[self.bucket(word)] += 1.0;
        }
        Ok(Embedding::new(counts)?.l2_normalized())
    }
}

/// Encode text of any length: direct when within the provider limit,
/// otherwise the centroid of per-sentence embeddings.
///
/// Sentences are split after `.`, `!` and `?`; a piece still over the limit
/// is further cut into windows of `max_tokens` words. Returns the embedding
/// and whether the split fallback was taken.
pub fn encode_with_split_fallback(
    provider: &dyn EncoderProvider,
    text: &str,
) -> Result<(Embedding, bool)> {
    if provider.count_tokens(text) <= provider.max_tokens() {
        return Ok((provider.encode(text)?, false));
    }
    let pieces = split_for_encoding(text, provider);
    let embeddings = pieces
        .iter()
        .map(|p| provider.encode(p))
        .collect::<Result<Vec<_>>>()?;
    Ok((centroid(&embeddings)?, true))
}

fn split_for_encoding(text: &str, provider: &dyn EncoderProvider) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        current.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            if !current.trim().is_empty() {
                sentences.push(std::mem::take(&mut current).trim().to_string());
            } else {
                current.clear();
            }
        }
    }
    if !current.trim().is_empty() {
        sentences.push(current.trim().to_string());
    }

    let max = provider.max_tokens();
    let mut pieces = Vec::new();
    for sentence in sentences {
        if provider.count_tokens(&sentence) <= max {
            pieces.push(sentence);
        } else {
            let words: Vec<&str> = sentence.split_whitespace().collect();
            for window in words.chunks(max.max(1)) {
                pieces.push(window.join(" "));
            }
        }
    }
    pieces
}
