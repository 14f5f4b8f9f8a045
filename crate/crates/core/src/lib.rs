//! Data-side machinery for cluster/instance distillation of
//! image-text embedding models:
//!
//! - [`embedding`]: the `EMB1` embedding file format, validation, normalization.
//! - [`balance`]: semantic deduplication via chunked top-k neighbors and union-find.
//! - [`cluster`]: spherical k-means producing prototypes and pseudo-labels.
//! - [`distill`]: logit, KL, contrastive, instance and overall losses with
//!   analytic gradients, plus negative-class sampling.
//!
//! The guide under `book/` walks through each stage; its Rust snippets are
//! compiled and run as doc-tests of this crate.

pub mod balance;
pub mod cluster;
pub mod distance;
pub mod distill;
pub mod embedding;
mod error;

pub use embedding::{normalize, read_embeddings, validate, write_embeddings, EmbeddingSet};
pub use error::{Error, ErrorClass, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/file-format.md")]
    mod file_format {}
    #[doc = include_str!("../../../book/src/semantic-balance.md")]
    mod semantic_balance {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
}
