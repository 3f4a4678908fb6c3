//! Recursive knowledge pursuit for prompt enhancement.
//!
//! Given a task prompt and an external knowledge base of fixed-size fact
//! blocks, this crate iteratively pulls the fact most relevant to the
//! *current* context — prompt plus everything pulled so far — so each
//! selection can ride on vocabulary introduced by the previous one. A
//! language model then compresses the assembled context into an enhanced
//! prompt for a text-driven generator (image, 3D or video), which it reaches
//! through a pluggable adapter.
//!
//! The whole pipeline runs offline with deterministic mock providers, which
//! is how the test suite drives it; remote HTTP providers plug in behind the
//! same traits. See the `book/` guide for a narrative walkthrough.
//!
//! ```
//! use kpursuit::corpus::FactStore;
//! use kpursuit::embed::HashedBagEncoder;
//! use kpursuit::index::VectorIndex;
//! use kpursuit::pursuit::{pursue, PursuitConfig};
//!
//! let mut store = FactStore::new(100);
//! store.add_document("eagles", "the sea eagle hunts fish near coastal cliffs").unwrap();
//! let encoder = HashedBagEncoder::new(256, 512);
//! let index = VectorIndex::build(&store, &encoder).unwrap();
//!
//! let (context, trace) = pursue("sea eagle", &index, &encoder, &PursuitConfig::default()).unwrap();
//! assert_eq!(context.facts.len(), 1);
//! assert_eq!(trace.steps.len(), 1);
//! ```

pub mod aggregate;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod generate;
pub mod index;
pub mod pipeline;
pub mod pursuit;
pub mod remote;
pub mod service;

pub use error::{Error, Result};

// Book chapters double as doctests so the guide's snippets stay honest.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/pursuit.md")]
    mod pursuit {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/generation.md")]
    mod generation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/operations.md")]
    mod operations {}
}
