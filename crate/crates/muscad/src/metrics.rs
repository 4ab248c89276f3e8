//! Unsupervised evaluation metrics and multi-label F1.
//!
//! Coherence metrics work on co-occurrence counts: NPMI over sliding-window
//! probabilities, UMass over document counts. Diversity measures token
//! overlap across aspects and Embedding Coherence the mean pairwise cosine
//! of an aspect's top terms. Rank averaging compares several models the way
//! a metric table would, with higher-better and closer-to-zero-better
//! orientations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{CoocStats, Vocabulary};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::lexicon::{AspectLexicon, LabelSet};
use crate::math::cosine;

// ---------------------------------------------------------------------------
// NPMI
// ---------------------------------------------------------------------------

/// Where the smoothing constant is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMode {
    /// `epsilon` is added to the raw pair count before converting to a
    /// probability; keeps probabilities at most (W+eps)/W.
    #[default]
    CountLevel,
    /// `epsilon` is added to the pair probability itself, as the formula is
    /// usually written.
    ProbabilityLevel,
}

/// Pairwise NPMI of two smoothed probabilities, clamped to [-1, 1].
///
/// Smoothing can push the raw ratio slightly out of range (for example when
/// a pair co-occurs in almost every window), so the value is clamped; a zero
/// denominator means the smoothed pair probability is one, which resolves to
/// the sign of the numerator.
fn npmi_pair(p_smooth: f64, p_i: f64, p_j: f64) -> f64 {
    let num = (p_smooth / (p_i * p_j)).ln();
    let den = -p_smooth.ln();
    let value = if den.abs() < 1e-15 {
        if num.abs() < 1e-15 {
            0.0
        } else {
            num.signum()
        }
    } else {
        num / den
    };
    value.clamp(-1.0, 1.0)
}

/// Mean NPMI over all unordered pairs of `topic_terms`, count-level smoothing.
pub fn npmi(stats: &CoocStats, topic_terms: &[u32], epsilon: f64) -> Result<f64> {
    npmi_with_mode(stats, topic_terms, epsilon, EpsilonMode::CountLevel)
}

pub fn npmi_with_mode(
    stats: &CoocStats,
    topic_terms: &[u32],
    epsilon: f64,
    mode: EpsilonMode,
) -> Result<f64> {
    if topic_terms.len() < 2 {
        return Err(Error::EmptyInput("npmi needs at least two terms".into()));
    }
    if stats.total_windows == 0 {
        return Err(Error::Config("co-occurrence statistics have zero windows".into()));
    }
    for &t in topic_terms {
        if stats.word_window_count(t) == 0 {
            return Err(Error::Config(format!("term id {t} has no window counts")));
        }
    }
    let w = stats.total_windows as f64;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, &wi) in topic_terms.iter().enumerate() {
        for &wj in &topic_terms[i + 1..] {
            let p_i = stats.word_window_count(wi) as f64 / w;
            let p_j = stats.word_window_count(wj) as f64 / w;
            let p_smooth = match mode {
                EpsilonMode::CountLevel => (stats.pair_count(wi, wj) as f64 + epsilon) / w,
                EpsilonMode::ProbabilityLevel => stats.pair_count(wi, wj) as f64 / w + epsilon,
            };
            sum += npmi_pair(p_smooth, p_i, p_j);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

// ---------------------------------------------------------------------------
// UMass
// ---------------------------------------------------------------------------

/// Mean UMass coherence with `topic_terms` in rank order: for every pair the
/// higher-ranked term conditions, `log((D(w_i, w_j) + eps) / D(w_j))`.
pub fn umass(stats: &CoocStats, topic_terms: &[u32], epsilon: f64) -> Result<f64> {
    if topic_terms.len() < 2 {
        return Err(Error::EmptyInput("umass needs at least two terms".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 1..topic_terms.len() {
        for j in 0..i {
            let d_j = stats.doc_count(topic_terms[j]);
            if d_j == 0 {
                return Err(Error::ZeroDocCount {
                    term: format!("word id {}", topic_terms[j]),
                });
            }
            let d_ij = stats.doc_pair_count(topic_terms[i], topic_terms[j]) as f64;
            sum += ((d_ij + epsilon) / d_j as f64).ln();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

// ---------------------------------------------------------------------------
// Diversity and Embedding Coherence
// ---------------------------------------------------------------------------

/// Fraction of unique tokens among the top `top_n` terms of every aspect.
pub fn diversity(lexicon: &AspectLexicon, top_n: usize) -> Result<f64> {
    if top_n == 0 {
        return Err(Error::Config("diversity needs top_n >= 1".into()));
    }
    let mut unique = BTreeSet::new();
    let mut total = 0usize;
    for aspect in &lexicon.aspects {
        if aspect.terms.len() < top_n {
            return Err(Error::Config(format!(
                "aspect {} has only {} terms, requested top {top_n}",
                aspect.index,
                aspect.terms.len()
            )));
        }
        for term in &aspect.terms[..top_n] {
            unique.insert(term.token.as_str());
            total += 1;
        }
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Mean pairwise cosine similarity among the first `n` of `topic_terms`.
pub fn embedding_coherence(
    embeddings: &EmbeddingMatrix,
    topic_terms: &[u32],
    n: usize,
) -> Result<f64> {
    if n < 2 {
        return Err(Error::EmptyInput("embedding coherence needs n >= 2".into()));
    }
    if topic_terms.len() < n {
        return Err(Error::Config(format!(
            "requested top {n} terms but only {} given",
            topic_terms.len()
        )));
    }
    let terms = &topic_terms[..n];
    for &t in terms {
        if t as usize >= embeddings.len() {
            return Err(Error::Dimension(format!("word id {t} has no embedding row")));
        }
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, &wi) in terms.iter().enumerate() {
        for &wj in &terms[i + 1..] {
            let c = cosine(embeddings.row(wi), embeddings.row(wj)).ok_or(Error::ZeroNorm {
                term: format!("word id {}", if crate::math::l2_norm(embeddings.row(wi)) == 0.0 { wi } else { wj }),
            })?;
            sum += c;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

// ---------------------------------------------------------------------------
// Multi-label F1
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct F1Report {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_label: BTreeMap<String, LabelStats>,
}

fn f1_from(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    // Count form of the harmonic mean: equals 2pr/(p+r) without the
    // intermediate rounding.
    let f1 = if 2 * tp + fp + fn_ > 0 {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Micro/macro F1 between predicted and gold label sets over a fixed label
/// universe. Labels with zero gold support contribute zero to the macro mean
/// unless `exclude_zero_support` drops them.
pub fn multilabel_f1(
    predicted: &LabelSet,
    gold: &LabelSet,
    label_universe: &[String],
    exclude_zero_support: bool,
) -> Result<F1Report> {
    let predicted_ids: BTreeSet<&String> = predicted.labels.keys().collect();
    let gold_ids: BTreeSet<&String> = gold.labels.keys().collect();
    if predicted_ids != gold_ids {
        return Err(Error::ReviewIdMismatch {
            only_predicted: predicted_ids.difference(&gold_ids).map(|s| (*s).clone()).collect(),
            only_gold: gold_ids.difference(&predicted_ids).map(|s| (*s).clone()).collect(),
        });
    }
    if label_universe.is_empty() {
        return Err(Error::EmptyInput("label universe is empty".into()));
    }

    let mut per_label: BTreeMap<String, (u64, u64, u64)> = label_universe
        .iter()
        .map(|l| (l.clone(), (0, 0, 0)))
        .collect();
    for (review, predicted_set) in &predicted.labels {
        let gold_set = &gold.labels[review];
        for label in label_universe {
            let p = predicted_set.contains(label);
            let g = gold_set.contains(label);
            let entry = per_label.get_mut(label).expect("initialized above");
            match (p, g) {
                (true, true) => entry.0 += 1,
                (true, false) => entry.1 += 1,
                (false, true) => entry.2 += 1,
                (false, false) => {}
            }
        }
    }

    let mut micro = (0u64, 0u64, 0u64);
    let mut macro_sum = 0.0;
    let mut macro_count = 0usize;
    let mut out = BTreeMap::new();
    for (label, (tp, fp, fn_)) in per_label {
        micro.0 += tp;
        micro.1 += fp;
        micro.2 += fn_;
        let support = tp + fn_;
        let (precision, recall, f1) = f1_from(tp, fp, fn_);
        if support > 0 || !exclude_zero_support {
            macro_sum += f1;
            macro_count += 1;
        }
        out.insert(
            label,
            LabelStats {
                tp,
                fp,
                fn_,
                support,
                precision,
                recall,
                f1,
            },
        );
    }
    let micro_f1 = f1_from(micro.0, micro.1, micro.2).2;
    let macro_f1 = if macro_count > 0 { macro_sum / macro_count as f64 } else { 0.0 };
    Ok(F1Report {
        micro_f1,
        macro_f1,
        per_label: out,
    })
}

// ---------------------------------------------------------------------------
// Rank averaging
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherBetter,
    CloserToZeroBetter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricColumn {
    pub name: String,
    pub orientation: Orientation,
}

/// One row per model; `values[c]` belongs to `columns[c]`, `None` when the
/// metric is unavailable for that model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricTable {
    pub columns: Vec<MetricColumn>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

#[derive(Debug, Clone)]
pub struct RankAverages {
    pub per_model: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

/// Rank models per metric (1 is best, ties share the average rank) and
/// average each model's ranks over the metrics it has values for.
pub fn rank_average(table: &MetricTable) -> Result<RankAverages> {
    if table.rows.len() < 2 {
        return Err(Error::Config("rank averaging needs at least two models".into()));
    }
    for (name, values) in &table.rows {
        if values.len() != table.columns.len() {
            return Err(Error::Dimension(format!(
                "model {name} has {} values for {} columns",
                values.len(),
                table.columns.len()
            )));
        }
    }

    let mut warnings = Vec::new();
    let mut rank_sums = vec![0.0; table.rows.len()];
    let mut rank_counts = vec![0usize; table.rows.len()];

    for (c, column) in table.columns.iter().enumerate() {
        // Sort keys ascending: smaller key = better rank.
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for (r, (name, values)) in table.rows.iter().enumerate() {
            match values[c] {
                Some(v) => {
                    let key = match column.orientation {
                        Orientation::HigherBetter => -v,
                        Orientation::CloserToZeroBetter => v.abs(),
                    };
                    entries.push((r, key));
                }
                None => warnings.push(format!("{name}: metric {} missing, skipped", column.name)),
            }
        }
        entries.sort_by(|a, b| a.1.total_cmp(&b.1));
        // Average ranks within tie groups.
        let mut i = 0;
        while i < entries.len() {
            let mut j = i;
            while j + 1 < entries.len() && entries[j + 1].1 == entries[i].1 {
                j += 1;
            }
            let rank = (i + 1 + j + 1) as f64 / 2.0;
            for entry in &entries[i..=j] {
                rank_sums[entry.0] += rank;
                rank_counts[entry.0] += 1;
            }
            i = j + 1;
        }
    }

    let mut per_model = Vec::with_capacity(table.rows.len());
    for (r, (name, _)) in table.rows.iter().enumerate() {
        if rank_counts[r] == 0 {
            return Err(Error::Config(format!("model {name} has no metric values")));
        }
        per_model.push((name.clone(), rank_sums[r] / rank_counts[r] as f64));
    }
    Ok(RankAverages {
        per_model,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Coherence report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoherenceOptions {
    /// Terms scored per aspect.
    pub top_n: usize,
    pub epsilon: f64,
    #[serde(default)]
    pub epsilon_mode: EpsilonMode,
}

impl Default for CoherenceOptions {
    fn default() -> Self {
        CoherenceOptions {
            top_n: 20,
            epsilon: 1.0,
            epsilon_mode: EpsilonMode::CountLevel,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub per_aspect_npmi: Vec<f64>,
    pub mean_npmi: f64,
    pub per_aspect_umass: Vec<f64>,
    pub mean_umass: f64,
    pub diversity: f64,
    pub per_aspect_ec: Vec<f64>,
    pub embedding_coherence: f64,
    pub top_n_used: usize,
    pub epsilon_used: f64,
}

/// Score every aspect of a lexicon against the corpus statistics and
/// embeddings.
pub fn coherence_report(
    lexicon: &AspectLexicon,
    stats: &CoocStats,
    embeddings: &EmbeddingMatrix,
    vocab: &Vocabulary,
    opts: &CoherenceOptions,
) -> Result<CoherenceReport> {
    let top_n = opts.top_n.min(lexicon.top_n());
    if top_n < 2 {
        return Err(Error::Config("coherence needs at least two terms per aspect".into()));
    }
    let mut per_aspect_npmi = Vec::new();
    let mut per_aspect_umass = Vec::new();
    let mut per_aspect_ec = Vec::new();
    for aspect in &lexicon.aspects {
        let ids: Vec<u32> = aspect.terms[..top_n]
            .iter()
            .map(|t| {
                vocab.id(&t.token).ok_or_else(|| Error::Config(format!(
                    "lexicon term {:?} is not in the vocabulary",
                    t.token
                )))
            })
            .collect::<Result<Vec<_>>>()?;
        per_aspect_npmi.push(npmi_with_mode(stats, &ids, opts.epsilon, opts.epsilon_mode)?);
        per_aspect_umass.push(umass(stats, &ids, opts.epsilon).map_err(|e| match e {
            Error::ZeroDocCount { term } => {
                let named = term
                    .strip_prefix("word id ")
                    .and_then(|id| id.parse::<u32>().ok())
                    .and_then(|id| vocab.token(id))
                    .map(|t| format!("term {t:?}"))
                    .unwrap_or(term);
                Error::ZeroDocCount { term: named }
            }
            other => other,
        })?);
        per_aspect_ec.push(embedding_coherence(embeddings, &ids, top_n)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CoherenceReport {
        mean_npmi: mean(&per_aspect_npmi),
        per_aspect_npmi,
        mean_umass: mean(&per_aspect_umass),
        per_aspect_umass,
        diversity: diversity(lexicon, top_n)?,
        embedding_coherence: mean(&per_aspect_ec),
        per_aspect_ec,
        top_n_used: top_n,
        epsilon_used: opts.epsilon,
    })
}

/// One row of the plain-text comparison table.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub name: String,
    pub npmi: f64,
    pub umass: f64,
    pub diversity: f64,
    pub ec: Option<f64>,
}

/// Aligned text table with NPMI, UMass, Diversity, EC and Rank Avg columns.
/// Rank Avg is filled in when at least two rows are present.
pub fn format_metric_table(rows: &[TableRow]) -> String {
    let ranks: Option<Vec<f64>> = if rows.len() >= 2 {
        let table = MetricTable {
            columns: vec![
                MetricColumn {
                    name: "NPMI".into(),
                    orientation: Orientation::HigherBetter,
                },
                MetricColumn {
                    name: "UMass".into(),
                    orientation: Orientation::CloserToZeroBetter,
                },
                MetricColumn {
                    name: "Diversity".into(),
                    orientation: Orientation::HigherBetter,
                },
                MetricColumn {
                    name: "EC".into(),
                    orientation: Orientation::HigherBetter,
                },
            ],
            rows: rows
                .iter()
                .map(|r| {
                    (
                        r.name.clone(),
                        vec![Some(r.npmi), Some(r.umass), Some(r.diversity), r.ec],
                    )
                })
                .collect(),
        };
        rank_average(&table)
            .ok()
            .map(|ra| ra.per_model.into_iter().map(|(_, rank)| rank).collect())
    } else {
        None
    };

    let name_width = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<name_width$}  {:>8}  {:>8}  {:>9}  {:>6}  {:>8}\n",
        "Model", "NPMI", "UMass", "Diversity", "EC", "Rank Avg"
    );
    for (i, row) in rows.iter().enumerate() {
        let ec = row.ec.map_or("-".to_string(), |v| format!("{v:.3}"));
        let rank = ranks
            .as_ref()
            .map_or("-".to_string(), |r| format!("{:.1}", r[i]));
        out.push_str(&format!(
            "{:<name_width$}  {:>8.3}  {:>8.3}  {:>9.3}  {:>6}  {:>8}\n",
            row.name, row.npmi, row.umass, row.diversity, ec, rank
        ));
    }
    out
}
