//! Planted-topic corpus generation.
//!
//! Sentences are drawn from disjoint per-topic vocabularies, giving a
//! recoverable ground truth for desk-scale validation: clustering should
//! separate the topic vocabularies and the trained model should group
//! sentences by their planted topic.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_corpus_from_reviews, CorpusConfig, ReviewRecord, TokenizedCorpus, Vocabulary};
use crate::embedding::EmbeddingMatrix;
use crate::math::Mat;

#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub topics: usize,
    pub vocab_per_topic: usize,
    pub sentences_per_topic: usize,
    /// Inclusive (min, max) token count per sentence.
    pub sentence_len: (usize, usize),
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            topics: 3,
            vocab_per_topic: 12,
            sentences_per_topic: 100,
            sentence_len: (4, 7),
            seed: 7,
        }
    }
}

/// Token string for word `j` of topic `k`.
pub fn planted_token(topic: usize, word: usize) -> String {
    format!("t{topic}w{word:02}")
}

/// Topic a token belongs to, recovered from its name.
pub fn planted_topic_of_token(token: &str) -> Option<usize> {
    token
        .strip_prefix('t')?
        .split('w')
        .next()?
        .parse()
        .ok()
}

/// Topic of sentence `s`: topics are generated round-robin.
pub fn planted_topic_of_sentence(spec: &PlantedSpec, s: usize) -> usize {
    s % spec.topics
}

/// One single-sentence review per generated sentence, topics interleaved.
pub fn planted_reviews(spec: &PlantedSpec) -> Vec<ReviewRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.topics * spec.sentences_per_topic);
    for i in 0..spec.sentences_per_topic {
        for topic in 0..spec.topics {
            let len = rng.random_range(spec.sentence_len.0..=spec.sentence_len.1);
            let tokens: Vec<String> = (0..len)
                .map(|_| planted_token(topic, rng.random_range(0..spec.vocab_per_topic)))
                .collect();
            records.push(ReviewRecord {
                id: format!("r{:04}", i * spec.topics + topic),
                text: Some(tokens.join(" ")),
                tokens: None,
            });
        }
    }
    records
}

/// Build the tokenized corpus of a planted spec (min_count 1, no stopwords).
pub fn planted_corpus(spec: &PlantedSpec) -> (TokenizedCorpus, Vocabulary) {
    let records = planted_reviews(spec);
    let config = CorpusConfig {
        lowercase: true,
        stopwords: None,
        min_count: 1,
    };
    build_corpus_from_reviews(&records, &config).expect("planted corpus is never empty")
}

/// Uniform random embeddings, handy for tests that need plausible vectors.
pub fn random_embeddings(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingMatrix {
        vectors: Mat::from_vec(n, dim, (0..n * dim).map(|_| rng.random_range(-0.5..0.5)).collect()),
        trained_epochs: 0,
        seed,
    }
}
