//! Unsupervised multi-aspect labeling of review corpora.
//!
//! The pipeline learns word embeddings from raw review text, seeds aspect
//! categories by clustering those embeddings, trains an attention-based
//! aspect model with a max-margin objective, extracts per-aspect term
//! lexicons, assigns multiple aspect labels to each review, and scores the
//! result with topic-coherence and classification metrics.
//!
//! ## Stages
//!
//! 1. [`corpus`] — ingest JSONL reviews, tokenize, build the vocabulary and
//!    co-occurrence statistics.
//! 2. [`embedding`] — train CBOW word embeddings.
//! 3. [`clustering`] — k-means over the embeddings; the normalized centroids
//!    seed the aspect matrix.
//! 4. [`aspect_model`] + [`training`] — multi-head attention sentence
//!    encoder optimized with a max-margin loss against sampled negatives.
//! 5. [`lexicon`] — per-aspect term rankings and multi-label annotation.
//! 6. [`naming`] — human-readable category names through a chat-completion
//!    endpoint, with an offline mapping fallback.
//! 7. [`metrics`] — NPMI, UMass, Diversity, Embedding Coherence, rank
//!    averaging and multi-label micro/macro F1.
//!
//! The [`pipeline`] module wires the stages together behind a single JSON
//! config with per-stage artifacts and manifests; the `muscad` binary is a
//! thin command-line front end over it.
//!
//! ## Examples
//!
//! Each capability has a runnable example:
//!
//! ```text
//! cargo run --example build_corpus
//! cargo run --example train_embeddings
//! cargo run --example cluster_terms
//! cargo run --example train_aspect_model
//! cargo run --example extract_lexicon
//! cargo run --example label_reviews
//! cargo run --example evaluate_metrics
//! cargo run --example name_categories
//! cargo run --example full_pipeline
//! ```

// Indexed loops and explicit per-term arithmetic mirror the formulas and
// their test oracles; iterator rewrites would obscure both.
#![allow(clippy::needless_range_loop, clippy::type_complexity)]

pub mod aspect_model;
pub mod clustering;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod lexicon;
pub mod math;
pub mod metrics;
pub mod naming;
pub mod pipeline;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
