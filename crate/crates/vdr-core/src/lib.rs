//! Sparse lexical retrieval over a vocabulary space.
//!
//! Texts are embedded into nonnegative `|V|`-dimensional vectors whose
//! dimensions correspond one-to-one with vocabulary tokens. A trainable
//! weighting function scores every dimension; a gating function (top-k of the
//! learned weights, union the bag-of-words dimensions of the text) sparsifies
//! the result. Retrieval is the exact sparse dot product between a query
//! embedding and document embeddings, served from an inverted index.
//!
//! Two query-side inference modes share the same index:
//! * **parametric** — the query runs through the full encoder pipeline;
//! * **nonparametric** — the query is a normalized bag-of-words indicator,
//!   requiring no encoder forward at all.
//!
//! Module map:
//! * [`vocab`] — vocabulary files, tokenization, bag-of-words vectors
//! * [`sparsevec`] — sparse vectors, the `elu1p` activation, gating, scoring
//! * [`encoder`] — embedding table + projection head, the three embed entry
//!   points, checkpoint I/O
//! * [`training`] — contrastive losses, exact gradients, AdamW, the train loop
//! * [`index`] — inverted index build/search/persistence and a brute-force
//!   oracle
//! * [`eval`] — TREC-format I/O, NDCG/Recall/MRR, paired t-test,
//!   interpretability reports
//! * [`bench`] — single-threaded latency/counter harness and the activation
//!   sweep
//! * [`synth`] — seeded synthetic topic corpora for end-to-end runs

pub mod bench;
mod binio;
pub mod encoder;
mod error;
pub mod eval;
pub mod index;
pub mod sparsevec;
pub mod synth;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
