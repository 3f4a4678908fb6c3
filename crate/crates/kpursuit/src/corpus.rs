//! Fact store: document chunking into fixed-size word blocks and JSON Lines
//! persistence.
//!
//! A "word" is a maximal nonempty run of non-whitespace characters. Documents
//! are whitespace-normalized before chunking, so a chunked fact's text always
//! joins its words with single spaces. The last block of a document may be
//! shorter than `block_size`; it is kept, not dropped or padded.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default words per block.
pub const DEFAULT_BLOCK_SIZE: usize = 100;

/// One knowledge block with stable identity and source metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: String,
    pub title: String,
    pub text: String,
    pub word_count: usize,
}

impl Fact {
    /// Build a fact, deriving `word_count` from the text.
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Fact {
        let text = text.into();
        let word_count = text.split_whitespace().count();
        Fact {
            id: id.into(),
            title: title.into(),
            text,
            word_count,
        }
    }
}

/// Ordered collection of facts backing a knowledge base.
#[derive(Debug, Clone)]
pub struct FactStore {
    facts: Vec<Fact>,
    block_size: usize,
    source_manifest: Vec<String>,
    ids: HashSet<String>,
}

impl FactStore {
    pub fn new(block_size: usize) -> FactStore {
        assert!(block_size >= 1, "block_size must be at least 1");
        FactStore {
            facts: Vec::new(),
            block_size,
            source_manifest: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn source_manifest(&self) -> &[String] {
        &self.source_manifest
    }

    pub fn get(&self, id: &str) -> Option<&Fact> {
        // Linear scan is fine at store sizes we target; lookups by id go
        // through the vector index in hot paths.
        self.facts.iter().find(|f| f.id == id)
    }

    /// Append a single fact, enforcing id uniqueness and the block-size cap.
    pub fn add_fact(&mut self, fact: Fact) -> Result<()> {
        if self.ids.contains(&fact.id) {
            return Err(Error::DuplicateFactId(fact.id));
        }
        if fact.word_count > self.block_size {
            return Err(Error::BlockSizeExceeded {
                id: fact.id,
                word_count: fact.word_count,
                block_size: self.block_size,
            });
        }
        self.ids.insert(fact.id.clone());
        self.facts.push(fact);
        Ok(())
    }

    /// Chunk a document and merge its blocks into the store.
    ///
    /// Returns the number of facts added. The document title is recorded in
    /// the source manifest.
    pub fn add_document(&mut self, title: &str, text: &str) -> Result<usize> {
        let facts = chunk_document(text, title, self.block_size)?;
        let added = facts.len();
        for fact in facts {
            self.add_fact(fact)?;
        }
        self.source_manifest.push(title.to_string());
        Ok(added)
    }

    /// Write the store as JSON Lines: a header record followed by one fact
    /// record per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        let header = HeaderRecord {
            block_size: self.block_size,
            sources: self.source_manifest.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for fact in &self.facts {
            let rec = FactRecord {
                id: &fact.id,
                title: &fact.title,
                text: &fact.text,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load a store previously written by [`FactStore::save`].
    ///
    /// Malformed lines are reported with their 1-based line number.
    pub fn load(path: impl AsRef<Path>) -> Result<FactStore> {
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines();

        let header_line = match lines.next() {
            Some(line) => line?,
            None => {
                return Err(Error::MalformedRecord {
                    line: 1,
                    message: "missing header record".into(),
                })
            }
        };
        let header: HeaderRecord =
            serde_json::from_str(&header_line).map_err(|e| Error::MalformedRecord {
                line: 1,
                message: e.to_string(),
            })?;

        let mut store = FactStore::new(header.block_size);
        store.source_manifest = header.sources;
        for (offset, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = offset + 2;
            let rec: OwnedFactRecord =
                serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                    line: line_no,
                    message: e.to_string(),
                })?;
            store.add_fact(Fact::new(rec.id, rec.title, rec.text))?;
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    block_size: usize,
    sources: Vec<String>,
}

#[derive(Serialize)]
struct FactRecord<'a> {
    id: &'a str,
    title: &'a str,
    text: &'a str,
}

#[derive(Deserialize)]
struct OwnedFactRecord {
    id: String,
    title: String,
    text: String,
}

/// Split a document into disjoint blocks of at most `block_size` words.
///
/// The text is whitespace-normalized first; concatenating the blocks' words
/// in order reproduces the normalized word sequence exactly. Every block
/// except possibly the last has exactly `block_size` words. Fact ids are
/// deterministic in `(doc_title, block ordinal)`.
pub fn chunk_document(doc_text: &str, doc_title: &str, block_size: usize) -> Result<Vec<Fact>> {
    assert!(block_size >= 1, "block_size must be at least 1");
    let words: Vec<&str> = doc_text.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::EmptyDocument);
    }
    let slug = title_slug(doc_title);
    let facts = words
        .chunks(block_size)
        .enumerate()
        .map(|(ordinal, block)| {
            Fact::new(
                format!("{slug}#{ordinal:05}"),
                doc_title.to_string(),
                block.join(" "),
            )
        })
        .collect();
    Ok(facts)
}

/// Deterministic id prefix from a document title: lowercased, alphanumerics
/// kept, runs of anything else collapsed to single dashes. Empty titles map
/// to `"doc"`.
fn title_slug(title: &str) -> String {
    let mut slug = String::with_capacity(title.len());
    let mut last_dash = true;
    for ch in title.chars() {
        if ch.is_alphanumeric() {
            slug.extend(ch.to_lowercase());
            last_dash = false;
        } else if !last_dash {
            slug.push('-');
            last_dash = true;
        }
    }
    let slug = slug.trim_end_matches('-');
    if slug.is_empty() {
        "doc".to_string()
    } else {
        slug.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        (0..n)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn hundred_word_document_is_one_full_block() {
        let facts = chunk_document(&words(100), "t", 100).unwrap();
        assert_eq!(facts.len(), 1);
        assert_eq!(facts[0].word_count, 100);
    }

    #[test]
    fn one_word_document_is_one_short_block() {
        let facts = chunk_document("solo", "t", 100).unwrap();
        assert_eq!(facts.len(), 1);
        assert_eq!(facts[0].word_count, 1);
        assert_eq!(facts[0].text, "solo");
    }

    #[test]
    fn chunks_partition_and_round_trip() {
        let input = words(250);
        let facts = chunk_document(&input, "t", 100).unwrap();
        let counts: Vec<usize> = facts.iter().map(|f| f.word_count).collect();
        assert_eq!(counts, vec![100, 100, 50]);
        let rejoined = facts
            .iter()
            .map(|f| f.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        assert_eq!(rejoined, input);
    }

    #[test]
    fn empty_document_errors() {
        assert!(matches!(
            chunk_document("  \n\t ", "t", 100),
            Err(Error::EmptyDocument)
        ));
    }

    #[test]
    fn chunking_is_deterministic() {
        let a = chunk_document("alpha beta gamma delta", "Birds of Prey", 2).unwrap();
        let b = chunk_document("alpha   beta\ngamma\tdelta", "Birds of Prey", 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].id, "birds-of-prey#00000");
        assert_eq!(a[1].id, "birds-of-prey#00001");
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let store = FactStore::new(100);
        store.save(&path).unwrap();
        let loaded = FactStore::load(&path).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded.block_size(), 100);
    }

    #[test]
    fn store_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut store = FactStore::new(100);
        store.add_document("doc one", &words(150)).unwrap();
        store
            .add_fact(Fact::new("x", "", "standalone fact"))
            .unwrap();
        store.save(&path).unwrap();
        let loaded = FactStore::load(&path).unwrap();
        assert_eq!(loaded.facts(), store.facts());
        assert_eq!(loaded.block_size(), store.block_size());
        assert_eq!(loaded.source_manifest(), store.source_manifest());
    }

    #[test]
    fn multi_line_and_non_ascii_text_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut store = FactStore::new(100);
        store
            .add_fact(Fact::new(
                "u1",
                "tītle",
                "première ligne\nzweite Zeile \u{1F985} 鷹",
            ))
            .unwrap();
        store.save(&path).unwrap();
        let loaded = FactStore::load(&path).unwrap();
        assert_eq!(
            loaded.facts()[0].text.as_bytes(),
            store.facts()[0].text.as_bytes()
        );
        assert_eq!(loaded.facts()[0].title, "tītle");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut store = FactStore::new(100);
        store.add_fact(Fact::new("a", "", "one")).unwrap();
        assert!(matches!(
            store.add_fact(Fact::new("a", "", "two")),
            Err(Error::DuplicateFactId(_))
        ));
    }

    #[test]
    fn malformed_record_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        std::fs::write(
            &path,
            "{\"block_size\":100,\"sources\":[]}\n{\"id\":\"a\",\"title\":\"\",\"text\":\"ok\"}\nnot json\n",
        )
        .unwrap();
        match FactStore::load(&path) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed record, got {other:?}"),
        }
    }

    proptest! {
        /// Blocks are pairwise disjoint and jointly exhaustive over the word
        /// sequence, for any document and block size.
        #[test]
        fn chunking_is_a_partition(
            n_words in 1usize..400,
            block_size in 1usize..120,
        ) {
            let input = words(n_words);
            let facts = chunk_document(&input, "t", block_size).unwrap();
            for f in &facts[..facts.len() - 1] {
                prop_assert_eq!(f.word_count, block_size);
            }
            let rejoined = facts.iter().map(|f| f.text.as_str()).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(rejoined, input);
        }
    }
}
