//! Review ingestion, tokenization, vocabulary and co-occurrence statistics.
//!
//! Input is JSONL, one object per review, either `{"id", "text"}` or
//! `{"id", "tokens": [..]}`. Tokenization is whitespace splitting with
//! optional lowercasing and an optional stopword list; a whitespace token
//! consisting solely of sentence-final punctuation (`.`, `?`, `!`) closes the
//! current sentence and stays as its last token. Anything smarter (language
//! detection, lemmatization, morphological analysis) belongs in an external
//! preprocessing step that feeds the `tokens` form.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel id for tokens that fell below the vocabulary threshold.
///
/// Sentinel positions are kept in the encoded sentences but are excluded from
/// every window (CBOW contexts and co-occurrence counting alike).
pub const OOV_ID: u32 = u32::MAX;

pub fn is_oov(id: u32) -> bool {
    id == OOV_ID
}

/// Magic first line of the corpus snapshot format.
pub const CORPUS_MAGIC: &str = "MUSCAD-CORPUS-v1";

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Frequency-thresholded vocabulary with dense word ids.
///
/// Ids are assigned by descending frequency with a lexicographic tie-break,
/// so rebuilding from the same corpus and config is byte-identical.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    frequencies: Vec<u64>,
    min_count: u64,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_parts(tokens: Vec<String>, frequencies: Vec<u64>, min_count: u64) -> Result<Self> {
        if tokens.len() != frequencies.len() {
            return Err(Error::Dimension(format!(
                "vocabulary has {} tokens but {} frequencies",
                tokens.len(),
                frequencies.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            frequencies,
            min_count,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn frequency(&self, id: u32) -> Option<u64> {
        self.frequencies.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    /// Encode a token to its id, mapping unknown tokens to [`OOV_ID`].
    pub fn encode(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(OOV_ID)
    }

    /// Write the vocabulary as TSV: `token \t id \t frequency`.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, (tok, freq)) in self.tokens.iter().zip(&self.frequencies).enumerate() {
            out.push_str(&format!("{tok}\t{id}\t{freq}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// TokenizedCorpus
// ---------------------------------------------------------------------------

/// Integer-coded sentences with review boundaries and retained raw text.
#[derive(Debug, Clone)]
pub struct TokenizedCorpus {
    /// Word-id sequences; entries may be [`OOV_ID`].
    pub sentences: Vec<Vec<u32>>,
    /// Review id -> contiguous sentence range. Ranges partition `sentences`.
    pub review_bounds: Vec<Range<usize>>,
    /// External review ids, parallel to `review_bounds`.
    pub review_ids: Vec<String>,
    /// Original sentence strings, parallel to `sentences`.
    pub raw_text: Vec<String>,
}

impl TokenizedCorpus {
    pub fn n_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn n_reviews(&self) -> usize {
        self.review_bounds.len()
    }

    /// In-vocabulary ids of one sentence, sentinels removed.
    pub fn in_vocab(&self, sentence: usize) -> impl Iterator<Item = u32> + '_ {
        self.sentences[sentence].iter().copied().filter(|&id| !is_oov(id))
    }

    /// Review index owning a sentence.
    pub fn review_of_sentence(&self, sentence: usize) -> usize {
        self.review_bounds
            .iter()
            .position(|r| r.contains(&sentence))
            .expect("sentence index out of bounds")
    }
}

// ---------------------------------------------------------------------------
// Building
// ---------------------------------------------------------------------------

/// Tokenizer and vocabulary settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub lowercase: bool,
    /// Optional stopword list, one token per line.
    pub stopwords: Option<PathBuf>,
    /// Tokens with corpus frequency below this threshold become [`OOV_ID`].
    pub min_count: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            lowercase: true,
            stopwords: None,
            min_count: 5,
        }
    }
}

/// One input review, as parsed from JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
}

fn is_sentence_boundary(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| matches!(c, '.' | '?' | '!'))
}

fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Read review records from a JSONL file.
pub fn read_reviews(path: &Path) -> Result<Vec<ReviewRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ReviewRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "review record".into(),
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        if record.text.is_none() && record.tokens.is_none() {
            return Err(Error::Format {
                what: "review record".into(),
                path: path.to_path_buf(),
                detail: format!("line {}: neither \"text\" nor \"tokens\" present", lineno + 1),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Build the corpus and vocabulary from JSONL review files.
pub fn build_corpus(
    files: &[PathBuf],
    config: &CorpusConfig,
) -> Result<(TokenizedCorpus, Vocabulary)> {
    let mut records = Vec::new();
    for path in files {
        records.extend(read_reviews(path)?);
    }
    build_corpus_from_reviews(&records, config)
}

/// Build the corpus and vocabulary from already-parsed review records.
pub fn build_corpus_from_reviews(
    records: &[ReviewRecord],
    config: &CorpusConfig,
) -> Result<(TokenizedCorpus, Vocabulary)> {
    if config.min_count < 1 {
        return Err(Error::Config("min_count must be >= 1".into()));
    }
    let stopwords = match &config.stopwords {
        Some(path) => load_stopwords(path)?,
        None => HashSet::new(),
    };

    // Tokenize each review into sentences of strings.
    let mut sentence_tokens: Vec<Vec<String>> = Vec::new();
    let mut raw_text: Vec<String> = Vec::new();
    let mut review_bounds: Vec<Range<usize>> = Vec::new();
    let mut review_ids: Vec<String> = Vec::new();

    for record in records {
        let stream: Vec<String> = match (&record.tokens, &record.text) {
            (Some(tokens), _) => tokens.clone(),
            (None, Some(text)) => text.split_whitespace().map(str::to_owned).collect(),
            (None, None) => unreachable!("validated at read time"),
        };

        let start = sentence_tokens.len();
        let mut current: Vec<String> = Vec::new();
        for token in stream {
            let boundary = is_sentence_boundary(&token);
            current.push(token);
            if boundary {
                push_sentence(
                    std::mem::take(&mut current),
                    config,
                    &stopwords,
                    &mut sentence_tokens,
                    &mut raw_text,
                );
            }
        }
        if !current.is_empty() {
            push_sentence(current, config, &stopwords, &mut sentence_tokens, &mut raw_text);
        }
        review_bounds.push(start..sentence_tokens.len());
        review_ids.push(record.id.clone());
    }

    // Frequency count over post-stopword tokens.
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for sentence in &sentence_tokens {
        for token in sentence {
            *counts.entry(token.as_str()).or_insert(0) += 1;
        }
    }

    let mut kept: Vec<(&str, u64)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= config.min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    if kept.is_empty() || sentence_tokens.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let tokens: Vec<String> = kept.iter().map(|&(t, _)| t.to_owned()).collect();
    let frequencies: Vec<u64> = kept.iter().map(|&(_, c)| c).collect();
    let vocab = Vocabulary::from_parts(tokens, frequencies, config.min_count)?;

    let sentences: Vec<Vec<u32>> = sentence_tokens
        .iter()
        .map(|s| s.iter().map(|t| vocab.encode(t)).collect())
        .collect();

    Ok((
        TokenizedCorpus {
            sentences,
            review_bounds,
            review_ids,
            raw_text,
        },
        vocab,
    ))
}

fn push_sentence(
    tokens: Vec<String>,
    config: &CorpusConfig,
    stopwords: &HashSet<String>,
    sentence_tokens: &mut Vec<Vec<String>>,
    raw_text: &mut Vec<String>,
) {
    raw_text.push(tokens.join(" "));
    let processed: Vec<String> = tokens
        .into_iter()
        .map(|t| if config.lowercase { t.to_lowercase() } else { t })
        .filter(|t| !stopwords.contains(t))
        .collect();
    sentence_tokens.push(processed);
}

// ---------------------------------------------------------------------------
// Co-occurrence statistics
// ---------------------------------------------------------------------------

/// What counts as a "document" for document-level co-occurrence counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocGranularity {
    Review,
    Sentence,
}

/// Sliding-window and document co-occurrence counts.
///
/// A window is the span of up to `window_size + 1` in-vocabulary tokens
/// starting at each position of a sentence (truncated at the sentence end);
/// sentinel tokens are removed before windows are formed. Within one window
/// each distinct word counts once and each unordered pair of distinct words
/// counts once.
#[derive(Debug, Clone)]
pub struct CoocStats {
    pub window_size: usize,
    pub granularity: DocGranularity,
    pair_counts: HashMap<(u32, u32), u64>,
    word_window_counts: HashMap<u32, u64>,
    doc_counts: HashMap<u32, u64>,
    doc_pair_counts: HashMap<(u32, u32), u64>,
    pub total_windows: u64,
    pub total_docs: u64,
}

fn pair_key(a: u32, b: u32) -> (u32, u32) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl CoocStats {
    pub fn pair_count(&self, a: u32, b: u32) -> u64 {
        self.pair_counts.get(&pair_key(a, b)).copied().unwrap_or(0)
    }

    pub fn word_window_count(&self, w: u32) -> u64 {
        self.word_window_counts.get(&w).copied().unwrap_or(0)
    }

    pub fn doc_count(&self, w: u32) -> u64 {
        self.doc_counts.get(&w).copied().unwrap_or(0)
    }

    pub fn doc_pair_count(&self, a: u32, b: u32) -> u64 {
        self.doc_pair_counts.get(&pair_key(a, b)).copied().unwrap_or(0)
    }

    /// P(w) from window counts.
    pub fn word_prob(&self, w: u32) -> f64 {
        self.word_window_count(w) as f64 / self.total_windows as f64
    }

    /// P(w_i, w_j) from window counts.
    pub fn pair_prob(&self, a: u32, b: u32) -> f64 {
        self.pair_count(a, b) as f64 / self.total_windows as f64
    }

    pub fn n_pairs(&self) -> usize {
        self.pair_counts.len()
    }
}

/// Count windows and document co-occurrences with documents = reviews.
pub fn compute_cooc_stats(corpus: &TokenizedCorpus, window_size: usize) -> Result<CoocStats> {
    compute_cooc_stats_with(corpus, window_size, DocGranularity::Review)
}

/// Count windows and document co-occurrences at a chosen document granularity.
pub fn compute_cooc_stats_with(
    corpus: &TokenizedCorpus,
    window_size: usize,
    granularity: DocGranularity,
) -> Result<CoocStats> {
    if window_size < 1 {
        return Err(Error::Config("window_size must be >= 1".into()));
    }
    if corpus.n_sentences() == 0 {
        return Err(Error::EmptyCorpus);
    }

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut word_window_counts: HashMap<u32, u64> = HashMap::new();
    let mut total_windows: u64 = 0;

    for s in 0..corpus.n_sentences() {
        let tokens: Vec<u32> = corpus.in_vocab(s).collect();
        for start in 0..tokens.len() {
            let end = (start + window_size + 1).min(tokens.len());
            let window: BTreeSet<u32> = tokens[start..end].iter().copied().collect();
            total_windows += 1;
            for &w in &window {
                *word_window_counts.entry(w).or_insert(0) += 1;
            }
            let distinct: Vec<u32> = window.into_iter().collect();
            for i in 0..distinct.len() {
                for j in i + 1..distinct.len() {
                    *pair_counts.entry(pair_key(distinct[i], distinct[j])).or_insert(0) += 1;
                }
            }
        }
    }

    // Document membership.
    let docs: Vec<BTreeSet<u32>> = match granularity {
        DocGranularity::Review => corpus
            .review_bounds
            .iter()
            .map(|r| r.clone().flat_map(|s| corpus.in_vocab(s)).collect())
            .collect(),
        DocGranularity::Sentence => (0..corpus.n_sentences())
            .map(|s| corpus.in_vocab(s).collect())
            .collect(),
    };

    let mut doc_counts: HashMap<u32, u64> = HashMap::new();
    let mut doc_pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    for doc in &docs {
        let distinct: Vec<u32> = doc.iter().copied().collect();
        for &w in &distinct {
            *doc_counts.entry(w).or_insert(0) += 1;
        }
        for i in 0..distinct.len() {
            for j in i + 1..distinct.len() {
                *doc_pair_counts.entry(pair_key(distinct[i], distinct[j])).or_insert(0) += 1;
            }
        }
    }

    Ok(CoocStats {
        window_size,
        granularity,
        pair_counts,
        word_window_counts,
        doc_counts,
        doc_pair_counts,
        total_windows,
        total_docs: docs.len() as u64,
    })
}

// ---------------------------------------------------------------------------
// Snapshot IO
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VocabHeader {
    min_count: u64,
    tokens: Vec<String>,
    frequencies: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct ReviewLine {
    id: String,
    sentences: Vec<Vec<u32>>,
    raw: Vec<String>,
}

/// Write the corpus snapshot: magic line, vocabulary header, one JSON line
/// per review.
pub fn save_corpus(path: &Path, corpus: &TokenizedCorpus, vocab: &Vocabulary) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{CORPUS_MAGIC}").expect("write to vec");
    let header = VocabHeader {
        min_count: vocab.min_count(),
        tokens: vocab.tokens().to_vec(),
        frequencies: vocab.frequencies().to_vec(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?).expect("write to vec");
    for (r, bounds) in corpus.review_bounds.iter().enumerate() {
        let line = ReviewLine {
            id: corpus.review_ids[r].clone(),
            sentences: corpus.sentences[bounds.clone()].to_vec(),
            raw: corpus.raw_text[bounds.clone()].to_vec(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?).expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load a corpus snapshot written by [`save_corpus`].
pub fn load_corpus(path: &Path) -> Result<(TokenizedCorpus, Vocabulary)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let bad = |detail: String| Error::Format {
        what: "corpus snapshot".into(),
        path: path.to_path_buf(),
        detail,
    };
    match lines.next() {
        Some(CORPUS_MAGIC) => {}
        other => return Err(bad(format!("expected magic {CORPUS_MAGIC:?}, found {other:?}"))),
    }
    let header: VocabHeader = serde_json::from_str(
        lines.next().ok_or_else(|| bad("missing vocabulary header".into()))?,
    )?;
    let vocab = Vocabulary::from_parts(header.tokens, header.frequencies, header.min_count)?;

    let mut sentences = Vec::new();
    let mut raw_text = Vec::new();
    let mut review_bounds = Vec::new();
    let mut review_ids = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let review: ReviewLine = serde_json::from_str(line)?;
        if review.raw.len() != review.sentences.len() {
            return Err(bad(format!("review {:?} has mismatched raw/sentence counts", review.id)));
        }
        let start = sentences.len();
        for (ids, raw) in review.sentences.into_iter().zip(review.raw) {
            for &id in &ids {
                if !is_oov(id) && id as usize >= vocab.len() {
                    return Err(bad(format!("word id {id} out of range")));
                }
            }
            sentences.push(ids);
            raw_text.push(raw);
        }
        review_bounds.push(start..sentences.len());
        review_ids.push(review.id);
    }
    Ok((
        TokenizedCorpus {
            sentences,
            review_bounds,
            review_ids,
            raw_text,
        },
        vocab,
    ))
}

#[derive(Serialize, Deserialize)]
struct CoocSnapshot {
    window_size: usize,
    granularity: DocGranularity,
    total_windows: u64,
    total_docs: u64,
    pair_counts: Vec<(u32, u32, u64)>,
    word_window_counts: Vec<(u32, u64)>,
    doc_counts: Vec<(u32, u64)>,
    doc_pair_counts: Vec<(u32, u32, u64)>,
}

/// Persist co-occurrence statistics as deterministic (sorted) JSON.
pub fn save_cooc_stats(path: &Path, stats: &CoocStats) -> Result<()> {
    let mut pair_counts: Vec<(u32, u32, u64)> =
        stats.pair_counts.iter().map(|(&(a, b), &c)| (a, b, c)).collect();
    pair_counts.sort_unstable();
    let mut word_window_counts: Vec<(u32, u64)> =
        stats.word_window_counts.iter().map(|(&w, &c)| (w, c)).collect();
    word_window_counts.sort_unstable();
    let mut doc_counts: Vec<(u32, u64)> =
        stats.doc_counts.iter().map(|(&w, &c)| (w, c)).collect();
    doc_counts.sort_unstable();
    let mut doc_pair_counts: Vec<(u32, u32, u64)> =
        stats.doc_pair_counts.iter().map(|(&(a, b), &c)| (a, b, c)).collect();
    doc_pair_counts.sort_unstable();

    let snapshot = CoocSnapshot {
        window_size: stats.window_size,
        granularity: stats.granularity,
        total_windows: stats.total_windows,
        total_docs: stats.total_docs,
        pair_counts,
        word_window_counts,
        doc_counts,
        doc_pair_counts,
    };
    fs::write(path, serde_json::to_string(&snapshot)?).map_err(|e| Error::io(path, e))
}

/// Load co-occurrence statistics written by [`save_cooc_stats`].
pub fn load_cooc_stats(path: &Path) -> Result<CoocStats> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let snapshot: CoocSnapshot = serde_json::from_str(&text)?;
    Ok(CoocStats {
        window_size: snapshot.window_size,
        granularity: snapshot.granularity,
        pair_counts: snapshot.pair_counts.into_iter().map(|(a, b, c)| ((a, b), c)).collect(),
        word_window_counts: snapshot.word_window_counts.into_iter().collect(),
        doc_counts: snapshot.doc_counts.into_iter().collect(),
        doc_pair_counts: snapshot
            .doc_pair_counts
            .into_iter()
            .map(|(a, b, c)| ((a, b), c))
            .collect(),
        total_windows: snapshot.total_windows,
        total_docs: snapshot.total_docs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn review(id: &str, text: &str) -> ReviewRecord {
        ReviewRecord {
            id: id.into(),
            text: Some(text.into()),
            tokens: None,
        }
    }

    fn config(min_count: u64) -> CorpusConfig {
        CorpusConfig {
            lowercase: true,
            stopwords: None,
            min_count,
        }
    }

    fn config_with_stopwords(min_count: u64, words: &[&str]) -> (CorpusConfig, tempfile::NamedTempFile) {
        let file = tempfile::NamedTempFile::new().unwrap();
        fs::write(file.path(), words.join("\n")).unwrap();
        (
            CorpusConfig {
                lowercase: true,
                stopwords: Some(file.path().to_path_buf()),
                min_count,
            },
            file,
        )
    }

    #[test]
    fn single_review_counts() {
        let (cfg, _guard) = config_with_stopwords(1, &["the"]);
        let (corpus, vocab) =
            build_corpus_from_reviews(&[review("r0", "great pool . loved the pool")], &cfg).unwrap();
        assert_eq!(vocab.len(), 4, "distinct content tokens: great, pool, '.', loved");
        assert_eq!(corpus.n_sentences(), 2);
        assert_eq!(corpus.n_reviews(), 1);
        assert_eq!(vocab.frequency(vocab.id("pool").unwrap()), Some(2));
    }

    #[test]
    fn min_count_threshold_drops_singletons() {
        let (cfg, _guard) = config_with_stopwords(2, &["the"]);
        let (corpus, vocab) =
            build_corpus_from_reviews(&[review("r0", "great pool . loved the pool")], &cfg).unwrap();
        assert_eq!(vocab.len(), 1);
        assert_eq!(vocab.token(0), Some("pool"));
        // Dropped tokens stay as sentinels, excluded from in_vocab iteration.
        let s0: Vec<u32> = corpus.in_vocab(0).collect();
        assert_eq!(s0, vec![0]);
        assert!(corpus.sentences[0].iter().any(|&id| is_oov(id)));
    }

    #[test]
    fn fixture_counts_match_independent_recount() {
        // Ten synthetic reviews; the oracle is a one-pass recount that shares
        // nothing with build_corpus besides the tokenizer rule.
        let texts = [
            "good breakfast . clean room",
            "pool was warm ! kids loved pool",
            "room had a view",
            "staff were kind . staff helped",
            "breakfast was late",
            "great view . great pool",
            "room room room",
            "noisy at night ?",
            "kind staff , great view",
            "pool pool pool .",
        ];
        let records: Vec<ReviewRecord> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| review(&format!("r{i}"), t))
            .collect();
        let (corpus, vocab) = build_corpus_from_reviews(&records, &config(1)).unwrap();

        // Oracle: count sentences and token frequencies directly.
        let mut expected_sentences = 0usize;
        let mut expected_counts: HashMap<String, u64> = HashMap::new();
        for text in &texts {
            let mut open = false;
            for tok in text.split_whitespace() {
                open = true;
                *expected_counts.entry(tok.to_lowercase()).or_insert(0) += 1;
                if is_sentence_boundary(tok) {
                    expected_sentences += 1;
                    open = false;
                }
            }
            if open {
                expected_sentences += 1;
            }
        }
        assert_eq!(corpus.n_sentences(), expected_sentences);
        assert_eq!(vocab.len(), expected_counts.len());
        for (tok, count) in expected_counts {
            let id = vocab.id(&tok).unwrap();
            assert_eq!(vocab.frequency(id), Some(count), "frequency of {tok:?}");
        }
    }

    #[test]
    fn vocabulary_ordering_is_frequency_then_lexicographic() {
        let (_, vocab) = build_corpus_from_reviews(
            &[review("r0", "b b a a c"), review("r1", "c")],
            &config(1),
        )
        .unwrap();
        // a:2 b:2 c:2 -> all tied, lexicographic.
        assert_eq!(vocab.tokens(), &["a", "b", "c"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = build_corpus_from_reviews(&[review("r0", "rare words only")], &config(10))
            .unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus));
    }

    #[test]
    fn unreadable_file_error_names_the_path() {
        let err = build_corpus(&[PathBuf::from("/nonexistent/reviews.jsonl")], &config(1))
            .unwrap_err();
        match err {
            Error::Io { path, .. } => assert_eq!(path, PathBuf::from("/nonexistent/reviews.jsonl")),
            other => panic!("expected Io error, got {other:?}"),
        }
    }

    #[test]
    fn review_bounds_partition_sentences() {
        let (corpus, _) = build_corpus_from_reviews(
            &[review("a", "x y . z"), review("b", "w"), review("c", "u . v !")],
            &config(1),
        )
        .unwrap();
        let mut covered = 0;
        for bounds in &corpus.review_bounds {
            assert_eq!(bounds.start, covered);
            covered = bounds.end;
        }
        assert_eq!(covered, corpus.n_sentences());
        assert_eq!(corpus.raw_text.len(), corpus.n_sentences());
    }

    #[test]
    fn single_pair_window() {
        let (corpus, vocab) =
            build_corpus_from_reviews(&[review("r0", "a b")], &config(1)).unwrap();
        let stats = compute_cooc_stats(&corpus, 1).unwrap();
        let a = vocab.id("a").unwrap();
        let b = vocab.id("b").unwrap();
        assert_eq!(stats.pair_count(a, b), 1);
        assert_eq!(stats.total_windows, 2);
        assert_eq!(stats.word_window_count(a), 1);
        assert_eq!(stats.word_window_count(b), 2);
    }

    #[test]
    fn document_counts_per_review() {
        let (corpus, vocab) = build_corpus_from_reviews(
            &[review("r0", "a b"), review("r1", "a c")],
            &config(1),
        )
        .unwrap();
        let stats = compute_cooc_stats(&corpus, 1).unwrap();
        let a = vocab.id("a").unwrap();
        let b = vocab.id("b").unwrap();
        assert_eq!(stats.doc_count(a), 2);
        assert_eq!(stats.doc_pair_count(a, b), 1);
        assert_eq!(stats.total_docs, 2);
    }

    #[test]
    fn sentence_granularity_counts_sentences_as_documents() {
        let (corpus, vocab) =
            build_corpus_from_reviews(&[review("r0", "a b . a c")], &config(1)).unwrap();
        let a = vocab.id("a").unwrap();
        let by_review =
            compute_cooc_stats_with(&corpus, 1, DocGranularity::Review).unwrap();
        let by_sentence =
            compute_cooc_stats_with(&corpus, 1, DocGranularity::Sentence).unwrap();
        assert_eq!(by_review.doc_count(a), 1);
        assert_eq!(by_review.total_docs, 1);
        assert_eq!(by_sentence.doc_count(a), 2);
        assert_eq!(by_sentence.total_docs, 2);
    }

    #[test]
    fn cooc_counts_match_brute_force_enumeration() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let words = ["a", "b", "c", "d", "e", "f", "g"];
        let records: Vec<ReviewRecord> = (0..25)
            .map(|i| {
                let sentences: Vec<String> = (0..rng.random_range(1..=3usize))
                    .map(|_| {
                        let len = rng.random_range(1..=6usize);
                        (0..len)
                            .map(|_| words[rng.random_range(0..words.len())])
                            .collect::<Vec<_>>()
                            .join(" ")
                    })
                    .collect();
                review(&format!("r{i}"), &sentences.join(" . "))
            })
            .collect();
        let (corpus, _vocab) = build_corpus_from_reviews(&records, &config(1)).unwrap();
        let window_size = 3;
        let stats = compute_cooc_stats(&corpus, window_size).unwrap();

        // Brute force: O(n * w^2) double loop over every window span.
        let mut pair_expect: HashMap<(u32, u32), u64> = HashMap::new();
        let mut word_expect: HashMap<u32, u64> = HashMap::new();
        let mut windows = 0u64;
        for s in 0..corpus.n_sentences() {
            let toks: Vec<u32> = corpus.in_vocab(s).collect();
            for start in 0..toks.len() {
                windows += 1;
                let end = (start + window_size + 1).min(toks.len());
                let mut seen: Vec<u32> = toks[start..end].to_vec();
                seen.sort_unstable();
                seen.dedup();
                for (i, &wi) in seen.iter().enumerate() {
                    *word_expect.entry(wi).or_insert(0) += 1;
                    for &wj in &seen[i + 1..] {
                        *pair_expect.entry((wi, wj)).or_insert(0) += 1;
                    }
                }
            }
        }
        assert_eq!(stats.total_windows, windows);
        for (&(a, b), &count) in &pair_expect {
            assert_eq!(stats.pair_count(a, b), count);
            assert_eq!(stats.pair_count(b, a), count, "pair symmetry");
        }
        assert_eq!(stats.n_pairs(), pair_expect.len());
        for (&w, &count) in &word_expect {
            assert_eq!(stats.word_window_count(w), count);
        }
    }

    #[test]
    fn snapshot_round_trip_is_byte_identical() {
        let records = vec![review("r0", "a b . c"), review("r1", "b c d")];
        let (corpus, vocab) = build_corpus_from_reviews(&records, &config(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_corpus(&path, &corpus, &vocab).unwrap();
        let first = fs::read(&path).unwrap();

        let (corpus2, vocab2) = load_corpus(&path).unwrap();
        assert_eq!(corpus2.sentences, corpus.sentences);
        assert_eq!(corpus2.review_ids, corpus.review_ids);
        assert_eq!(vocab2.tokens(), vocab.tokens());

        let path2 = dir.path().join("corpus2.jsonl");
        save_corpus(&path2, &corpus2, &vocab2).unwrap();
        assert_eq!(first, fs::read(&path2).unwrap());
    }

    #[test]
    fn rebuild_from_same_input_is_identical() {
        let records = vec![review("r0", "pool view pool . staff")];
        let (c1, v1) = build_corpus_from_reviews(&records, &config(1)).unwrap();
        let (c2, v2) = build_corpus_from_reviews(&records, &config(1)).unwrap();
        assert_eq!(v1.tokens(), v2.tokens());
        assert_eq!(c1.sentences, c2.sentences);
    }
}
