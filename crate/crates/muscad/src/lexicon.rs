//! Aspect-term lexicons and multi-label annotation.
//!
//! A lexicon ranks every vocabulary word against each aspect row by cosine
//! similarity and keeps the top N. Labeling matches sentence tokens against
//! the term lists: a sentence receives an aspect when at least one of its
//! tokens is in that aspect's list, and a review's labels are the union over
//! its sentences. A model-based mode assigns aspects whose probability
//! clears a threshold instead.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aspect_model::{embedding_rows, forward, AspectModelParams};
use crate::corpus::{TokenizedCorpus, Vocabulary};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::math::cosine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Auto,
    LlmNamed,
    HumanEdited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectTerm {
    pub token: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AspectEntry {
    pub index: usize,
    pub category_name: String,
    pub provenance: Provenance,
    /// Sorted by score descending, ties broken lexicographically.
    pub terms: Vec<AspectTerm>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AspectLexicon {
    pub aspects: Vec<AspectEntry>,
}

impl AspectLexicon {
    pub fn top_n(&self) -> usize {
        self.aspects.first().map_or(0, |a| a.terms.len())
    }

    pub fn k(&self) -> usize {
        self.aspects.len()
    }

    pub fn category_names(&self) -> Vec<String> {
        self.aspects.iter().map(|a| a.category_name.clone()).collect()
    }

    /// Shrink every aspect to its first `top_n` terms.
    pub fn truncated(&self, top_n: usize) -> Result<AspectLexicon> {
        if top_n > self.top_n() {
            return Err(Error::Config(format!(
                "cannot truncate to {top_n} terms, lexicon depth is {}",
                self.top_n()
            )));
        }
        Ok(AspectLexicon {
            aspects: self
                .aspects
                .iter()
                .map(|a| AspectEntry {
                    index: a.index,
                    category_name: a.category_name.clone(),
                    provenance: a.provenance,
                    terms: a.terms[..top_n].to_vec(),
                })
                .collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let top_n = self.top_n();
        for aspect in &self.aspects {
            if aspect.terms.len() != top_n {
                return Err(Error::Config(format!(
                    "aspect {} has {} terms, expected {top_n}",
                    aspect.index,
                    aspect.terms.len()
                )));
            }
            let distinct: BTreeSet<&str> =
                aspect.terms.iter().map(|t| t.token.as_str()).collect();
            if distinct.len() != aspect.terms.len() {
                return Err(Error::Config(format!(
                    "aspect {} repeats a term",
                    aspect.index
                )));
            }
            for pair in aspect.terms.windows(2) {
                let ordered = pair[0].score > pair[1].score
                    || (pair[0].score == pair[1].score && pair[0].token < pair[1].token);
                if !ordered {
                    return Err(Error::Config(format!(
                        "aspect {} terms are not sorted",
                        aspect.index
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rank all vocabulary words against each aspect row by cosine similarity.
pub fn extract_lexicon(
    model: &AspectModelParams,
    embeddings: &EmbeddingMatrix,
    vocab: &Vocabulary,
    top_n: usize,
) -> Result<AspectLexicon> {
    if top_n < 1 {
        return Err(Error::Config("top_n must be >= 1".into()));
    }
    if top_n > vocab.len() {
        return Err(Error::Config(format!(
            "top_n {top_n} exceeds vocabulary size {}",
            vocab.len()
        )));
    }
    if embeddings.len() != vocab.len() {
        return Err(Error::Dimension(format!(
            "embedding has {} rows but vocabulary has {} tokens",
            embeddings.len(),
            vocab.len()
        )));
    }
    let mut aspects = Vec::with_capacity(model.k_aspects);
    for k in 0..model.k_aspects {
        let aspect_row = model.ec.row(k);
        let mut scored: Vec<AspectTerm> = (0..vocab.len() as u32)
            .map(|id| AspectTerm {
                token: vocab.token(id).expect("dense ids").to_owned(),
                // Zero-norm rows cannot be compared; score them neutrally.
                score: cosine(embeddings.row(id), aspect_row).unwrap_or(0.0),
            })
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.token.cmp(&b.token)));
        scored.truncate(top_n);
        aspects.push(AspectEntry {
            index: k,
            category_name: format!("aspect_{k}"),
            provenance: Provenance::Auto,
            terms: scored,
        });
    }
    Ok(AspectLexicon { aspects })
}

// ---------------------------------------------------------------------------
// Labeling
// ---------------------------------------------------------------------------

/// Multi-label assignments plus the per-sentence matches that produced them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSet {
    /// Review id -> assigned category names. Reviews with no match keep an
    /// empty set rather than being dropped.
    pub labels: BTreeMap<String, BTreeSet<String>>,
    /// Sentence index -> matched (token, aspect index) pairs.
    pub sentence_trace: BTreeMap<usize, Vec<(String, usize)>>,
}

impl LabelSet {
    pub fn label_universe(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for labels in self.labels.values() {
            set.extend(labels.iter().cloned());
        }
        set.into_iter().collect()
    }
}

/// Dictionary-based annotation: exact token match against the term lists.
pub fn label_reviews(
    corpus: &TokenizedCorpus,
    vocab: &Vocabulary,
    lexicon: &AspectLexicon,
) -> LabelSet {
    let mut term_to_aspects: HashMap<&str, Vec<usize>> = HashMap::new();
    for aspect in &lexicon.aspects {
        for term in &aspect.terms {
            term_to_aspects.entry(term.token.as_str()).or_default().push(aspect.index);
        }
    }

    let mut result = LabelSet::default();
    for (r, bounds) in corpus.review_bounds.iter().enumerate() {
        let review_id = corpus.review_ids[r].clone();
        let mut review_labels = BTreeSet::new();
        for s in bounds.clone() {
            let mut matches = Vec::new();
            for id in corpus.in_vocab(s) {
                let token = vocab.token(id).expect("in-vocab id");
                if let Some(aspects) = term_to_aspects.get(token) {
                    for &aspect in aspects {
                        matches.push((token.to_owned(), aspect));
                        review_labels
                            .insert(lexicon.aspects[aspect].category_name.clone());
                    }
                }
            }
            if !matches.is_empty() {
                result.sentence_trace.insert(s, matches);
            }
        }
        result.labels.insert(review_id, review_labels);
    }
    result
}

/// Model-based annotation: a sentence receives every aspect whose probability
/// reaches `tau`; review labels are the union over sentences.
pub fn label_reviews_with_model(
    corpus: &TokenizedCorpus,
    embeddings: &EmbeddingMatrix,
    params: &AspectModelParams,
    lexicon: &AspectLexicon,
    tau: f64,
) -> Result<LabelSet> {
    let mut result = LabelSet::default();
    for (r, bounds) in corpus.review_bounds.iter().enumerate() {
        let review_id = corpus.review_ids[r].clone();
        let mut review_labels = BTreeSet::new();
        for s in bounds.clone() {
            let ids: Vec<u32> = corpus.in_vocab(s).collect();
            if ids.is_empty() {
                continue;
            }
            let e = embedding_rows(embeddings, &ids)?;
            let trace = forward(&e, params)?;
            let mut matches = Vec::new();
            for (aspect, &p) in trace.aspect_probs.iter().enumerate() {
                if p >= tau {
                    matches.push((format!("p={p:.3}"), aspect));
                    review_labels.insert(lexicon.aspects[aspect].category_name.clone());
                }
            }
            if !matches.is_empty() {
                result.sentence_trace.insert(s, matches);
            }
        }
        result.labels.insert(review_id, review_labels);
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub fn save_lexicon(path: &Path, lexicon: &AspectLexicon) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(lexicon)?).map_err(|e| Error::io(path, e))
}

pub fn load_lexicon(path: &Path) -> Result<AspectLexicon> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lexicon: AspectLexicon = serde_json::from_str(&text)?;
    lexicon.validate()?;
    Ok(lexicon)
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    review_id: String,
    labels: Vec<String>,
    #[serde(default)]
    matched_terms: Vec<MatchedTerm>,
}

#[derive(Serialize, Deserialize)]
struct MatchedTerm {
    sentence: usize,
    token: String,
    aspect: usize,
}

/// Write labels as JSONL, one record per review in sorted review-id order.
pub fn save_labels(path: &Path, labels: &LabelSet, corpus: &TokenizedCorpus) -> Result<()> {
    let mut out = Vec::new();
    for (review_id, label_set) in &labels.labels {
        let review_idx = corpus.review_ids.iter().position(|id| id == review_id);
        let mut matched_terms = Vec::new();
        if let Some(r) = review_idx {
            for s in corpus.review_bounds[r].clone() {
                if let Some(matches) = labels.sentence_trace.get(&s) {
                    for (token, aspect) in matches {
                        matched_terms.push(MatchedTerm {
                            sentence: s,
                            token: token.clone(),
                            aspect: *aspect,
                        });
                    }
                }
            }
        }
        let line = LabelLine {
            review_id: review_id.clone(),
            labels: label_set.iter().cloned().collect(),
            matched_terms,
        };
        writeln!(out, "{}", serde_json::to_string(&line)?).expect("vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read labels written by [`save_labels`] (or hand-built gold files of the
/// same shape).
pub fn load_labels(path: &Path) -> Result<LabelSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut result = LabelSet::default();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: LabelLine = serde_json::from_str(line)?;
        result
            .labels
            .insert(record.review_id, record.labels.into_iter().collect());
        for term in record.matched_terms {
            result
                .sentence_trace
                .entry(term.sentence)
                .or_default()
                .push((term.token, term.aspect));
        }
    }
    Ok(result)
}
