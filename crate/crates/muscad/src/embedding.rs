//! CBOW word-embedding training.
//!
//! The center word is predicted from the mean of its context vectors. The
//! output layer is negative sampling over a unigram^0.75 noise distribution;
//! a full-softmax mode is kept behind a flag for desk-scale gradient
//! verification. Training is plain SGD with a linear learning-rate decay.
//!
//! Parameters live in atomic cells so that the optional multi-threaded mode
//! can update them lock-free (hogwild contract: concurrent unsynchronized
//! updates tolerated, determinism waived above one thread). Single-threaded
//! runs are bit-reproducible for a fixed seed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenizedCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::math::{softmax_in_place, Mat};

/// Magic header of the binary embedding snapshot.
pub const EMBEDDING_MAGIC: &[u8] = b"MUSCAD-EMB-v1";

/// Output-layer approximation used by CBOW training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CbowOutput {
    #[default]
    NegativeSampling,
    FullSoftmax,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CbowConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_lr: f64,
    pub seed: u64,
    #[serde(default)]
    pub output: CbowOutput,
    /// Worker threads; values above 1 waive determinism.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_threads() -> usize {
    1
}

impl Default for CbowConfig {
    fn default() -> Self {
        CbowConfig {
            dim: 200,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            min_lr: 0.0001,
            seed: 42,
            output: CbowOutput::NegativeSampling,
            threads: 1,
        }
    }
}

impl CbowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("embedding dim must be >= 2".into()));
        }
        if self.window < 1 {
            return Err(Error::Config("cbow window must be >= 1".into()));
        }
        if self.negatives < 1 {
            return Err(Error::Config("cbow negatives must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("cbow epochs must be >= 1".into()));
        }
        if !(self.learning_rate > self.min_lr && self.min_lr >= 0.0) {
            return Err(Error::Config(
                "cbow requires learning_rate > min_lr >= 0".into(),
            ));
        }
        if self.threads < 1 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dense word vectors, one row per vocabulary id.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub vectors: Mat,
    pub trained_epochs: usize,
    pub seed: u64,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, id: u32) -> &[f64] {
        self.vectors.row(id as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() < 2 {
            return Err(Error::Config("embedding dim must be >= 2".into()));
        }
        if !self.vectors.is_finite() {
            return Err(Error::NonFinite {
                what: "value".into(),
                block: "embedding matrix".into(),
            });
        }
        Ok(())
    }
}

/// Arithmetic mean of the selected embedding rows.
pub fn average_context(embeddings: &EmbeddingMatrix, context_ids: &[u32]) -> Result<Vec<f64>> {
    if context_ids.is_empty() {
        return Err(Error::EmptyInput("average_context needs at least one id".into()));
    }
    let mut out = vec![0.0; embeddings.dim()];
    for &id in context_ids {
        for (o, &v) in out.iter_mut().zip(embeddings.row(id)) {
            *o += v;
        }
    }
    let n = context_ids.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shared parameter storage (hogwild-compatible)
// ---------------------------------------------------------------------------

struct AtomicF64(AtomicU64);

impl AtomicF64 {
    fn new(v: f64) -> Self {
        AtomicF64(AtomicU64::new(v.to_bits()))
    }

    #[inline]
    fn get(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Relaxed))
    }

    #[inline]
    fn set(&self, v: f64) {
        self.0.store(v.to_bits(), Ordering::Relaxed);
    }

    #[inline]
    fn add(&self, dv: f64) {
        self.set(self.get() + dv);
    }
}

struct SharedMat {
    rows: usize,
    cols: usize,
    data: Vec<AtomicF64>,
}

impl SharedMat {
    fn new(rows: usize, cols: usize, mut init: impl FnMut() -> f64) -> Self {
        let data = (0..rows * cols).map(|_| AtomicF64::new(init())).collect();
        SharedMat { rows, cols, data }
    }

    #[inline]
    fn row(&self, i: usize) -> &[AtomicF64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn read_row(&self, i: usize, out: &mut [f64]) {
        for (o, cell) in out.iter_mut().zip(self.row(i)) {
            *o = cell.get();
        }
    }

    fn to_mat(&self) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(AtomicF64::get).collect())
    }
}

// ---------------------------------------------------------------------------
// Loss and gradients for a single (context, center) pair
// ---------------------------------------------------------------------------

#[inline]
fn ln_sigmoid(x: f64) -> f64 {
    // -softplus(-x), stable on both tails.
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Negative-sampling loss of one pair:
/// `-ln s(v_c . h) - sum_n ln s(-v_n . h)` with `h` the context mean.
#[cfg(test)]
fn ns_pair_loss(input: &Mat, output: &Mat, context: &[u32], center: u32, negatives: &[u32]) -> f64 {
    let dim = input.cols();
    let mut h = vec![0.0; dim];
    for &c in context {
        for (hv, &v) in h.iter_mut().zip(input.row(c as usize)) {
            *hv += v;
        }
    }
    let scale = 1.0 / context.len() as f64;
    for hv in &mut h {
        *hv *= scale;
    }
    let score = |w: u32| -> f64 {
        h.iter().zip(output.row(w as usize)).map(|(a, b)| a * b).sum()
    };
    let mut loss = -ln_sigmoid(score(center));
    for &n in negatives {
        loss += -ln_sigmoid(-score(n));
    }
    loss
}

/// Analytic gradients of [`ns_pair_loss`]: the per-context-row input gradient
/// and the per-word output-row gradients.
fn ns_pair_grads(
    input: &Mat,
    output: &Mat,
    context: &[u32],
    center: u32,
    negatives: &[u32],
) -> (f64, Vec<f64>, Vec<(u32, Vec<f64>)>) {
    let dim = input.cols();
    let mut h = vec![0.0; dim];
    for &c in context {
        for (hv, &v) in h.iter_mut().zip(input.row(c as usize)) {
            *hv += v;
        }
    }
    let scale = 1.0 / context.len() as f64;
    for hv in &mut h {
        *hv *= scale;
    }

    let mut loss = 0.0;
    let mut d_h = vec![0.0; dim];
    let mut d_out = Vec::with_capacity(1 + negatives.len());
    let mut accumulate = |w: u32, label: f64, loss: &mut f64, d_h: &mut [f64]| {
        let row = output.row(w as usize);
        let s: f64 = h.iter().zip(row).map(|(a, b)| a * b).sum();
        *loss += if label == 1.0 { -ln_sigmoid(s) } else { -ln_sigmoid(-s) };
        let g = sigmoid(s) - label;
        for (dh, &v) in d_h.iter_mut().zip(row) {
            *dh += g * v;
        }
        d_out.push((w, h.iter().map(|&hv| g * hv).collect()));
    };
    accumulate(center, 1.0, &mut loss, &mut d_h);
    for &n in negatives {
        accumulate(n, 0.0, &mut loss, &mut d_h);
    }

    // d loss / d input[c] = d_h / |context| for every context row.
    let d_input_row: Vec<f64> = d_h.iter().map(|&v| v * scale).collect();
    (loss, d_input_row, d_out)
}

/// Full-softmax loss of one pair: `-ln softmax(output . h)[center]`.
#[cfg(test)]
fn softmax_pair_loss(input: &Mat, output: &Mat, context: &[u32], center: u32) -> f64 {
    let dim = input.cols();
    let mut h = vec![0.0; dim];
    for &c in context {
        for (hv, &v) in h.iter_mut().zip(input.row(c as usize)) {
            *hv += v;
        }
    }
    let scale = 1.0 / context.len() as f64;
    for hv in &mut h {
        *hv *= scale;
    }
    let mut logits: Vec<f64> = (0..output.rows())
        .map(|w| h.iter().zip(output.row(w)).map(|(a, b)| a * b).sum())
        .collect();
    softmax_in_place(&mut logits);
    -logits[center as usize].ln()
}

fn softmax_pair_grads(
    input: &Mat,
    output: &Mat,
    context: &[u32],
    center: u32,
) -> (f64, Vec<f64>, Vec<(u32, Vec<f64>)>) {
    let dim = input.cols();
    let mut h = vec![0.0; dim];
    for &c in context {
        for (hv, &v) in h.iter_mut().zip(input.row(c as usize)) {
            *hv += v;
        }
    }
    let scale = 1.0 / context.len() as f64;
    for hv in &mut h {
        *hv *= scale;
    }
    let mut probs: Vec<f64> = (0..output.rows())
        .map(|w| h.iter().zip(output.row(w)).map(|(a, b)| a * b).sum())
        .collect();
    softmax_in_place(&mut probs);
    let loss = -probs[center as usize].ln();

    let mut d_h = vec![0.0; dim];
    let mut d_out = Vec::with_capacity(output.rows());
    for (w, &p) in probs.iter().enumerate() {
        let g = p - if w == center as usize { 1.0 } else { 0.0 };
        for (dh, &v) in d_h.iter_mut().zip(output.row(w)) {
            *dh += g * v;
        }
        d_out.push((w as u32, h.iter().map(|&hv| g * hv).collect()));
    }
    let d_input_row: Vec<f64> = d_h.iter().map(|&v| v * scale).collect();
    (loss, d_input_row, d_out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

fn unigram_cdf(vocab: &Vocabulary) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(vocab.len());
    let mut acc = 0.0;
    for &f in vocab.frequencies() {
        acc += (f as f64).powf(0.75);
        cdf.push(acc);
    }
    cdf
}

fn sample_noise(cdf: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let total = *cdf.last().expect("non-empty vocabulary");
    let x = rng.random::<f64>() * total;
    cdf.partition_point(|&c| c <= x).min(cdf.len() - 1) as u32
}

/// Train CBOW embeddings over the corpus.
pub fn train_cbow(
    corpus: &TokenizedCorpus,
    vocab: &Vocabulary,
    config: &CbowConfig,
) -> Result<EmbeddingMatrix> {
    config.validate()?;
    if corpus.n_sentences() == 0 {
        return Err(Error::EmptyCorpus);
    }
    if config.output == CbowOutput::NegativeSampling && vocab.len() < config.negatives + 1 {
        return Err(Error::Config(format!(
            "vocabulary of {} words cannot support {} negatives",
            vocab.len(),
            config.negatives
        )));
    }

    // Pre-filter sentences to their in-vocabulary tokens; every position of a
    // sentence with >= 2 tokens yields one (context, center) pair.
    let sentences: Vec<Vec<u32>> = (0..corpus.n_sentences())
        .map(|s| corpus.in_vocab(s).collect())
        .filter(|s: &Vec<u32>| s.len() >= 2)
        .collect();
    let pairs_per_epoch: u64 = sentences.iter().map(|s| s.len() as u64).sum();
    if pairs_per_epoch == 0 {
        return Err(Error::EmptyInput(
            "no training windows: every sentence has fewer than two in-vocabulary tokens".into(),
        ));
    }

    let dim = config.dim;
    let bound = 0.5 / dim as f64;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let input = SharedMat::new(vocab.len(), dim, || init_rng.random_range(-bound..bound));
    let output = SharedMat::new(vocab.len(), dim, || 0.0);

    let cdf = unigram_cdf(vocab);
    let total_pairs = pairs_per_epoch * config.epochs as u64;
    let progress = AtomicU64::new(0);

    let worker = |shard: &[Vec<u32>], thread_idx: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1 + thread_idx));
        let mut e_buf = vec![0.0; dim];
        for _epoch in 0..config.epochs {
            for sentence in shard {
                for center_pos in 0..sentence.len() {
                    let done = progress.fetch_add(1, Ordering::Relaxed);
                    let frac = done as f64 / total_pairs as f64;
                    let lr = (config.learning_rate
                        - (config.learning_rate - config.min_lr) * frac)
                        .max(config.min_lr);

                    let lo = center_pos.saturating_sub(config.window);
                    let hi = (center_pos + config.window + 1).min(sentence.len());
                    let context: Vec<u32> = (lo..hi)
                        .filter(|&p| p != center_pos)
                        .map(|p| sentence[p])
                        .collect();
                    if context.is_empty() {
                        continue;
                    }
                    let center = sentence[center_pos];

                    // Snapshot parameter rows, compute grads, apply update.
                    let snapshot_input = snapshot_rows(&input, &context, dim, &mut e_buf);
                    match config.output {
                        CbowOutput::NegativeSampling => {
                            let mut negatives = Vec::with_capacity(config.negatives);
                            for _ in 0..config.negatives {
                                let n = sample_noise(&cdf, &mut rng);
                                if n != center {
                                    negatives.push(n);
                                }
                            }
                            let touched: Vec<u32> =
                                std::iter::once(center).chain(negatives.iter().copied()).collect();
                            let snapshot_output = snapshot_rows(&output, &touched, dim, &mut e_buf);
                            let ctx_local: Vec<u32> = (0..context.len() as u32).collect();
                            let negs_local: Vec<u32> = (1..touched.len() as u32).collect();
                            let (_, d_in, d_out) = ns_pair_grads(
                                &snapshot_input,
                                &snapshot_output,
                                &ctx_local,
                                0,
                                &negs_local,
                            );
                            for &c in &context {
                                for (cell, &g) in input.row(c as usize).iter().zip(&d_in) {
                                    cell.add(-lr * g);
                                }
                            }
                            for (local, grad) in d_out {
                                let w = touched[local as usize];
                                for (cell, &g) in output.row(w as usize).iter().zip(&grad) {
                                    cell.add(-lr * g);
                                }
                            }
                        }
                        CbowOutput::FullSoftmax => {
                            let snapshot_output = output.to_mat();
                            let ctx_local: Vec<u32> = (0..context.len() as u32).collect();
                            let (_, d_in, d_out) =
                                softmax_pair_grads(&snapshot_input, &snapshot_output, &ctx_local, center);
                            for &c in &context {
                                for (cell, &g) in input.row(c as usize).iter().zip(&d_in) {
                                    cell.add(-lr * g);
                                }
                            }
                            for (w, grad) in d_out {
                                for (cell, &g) in output.row(w as usize).iter().zip(&grad) {
                                    cell.add(-lr * g);
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    if config.threads <= 1 {
        worker(&sentences, 0);
    } else {
        let shard_size = sentences.len().div_ceil(config.threads);
        std::thread::scope(|scope| {
            for (idx, shard) in sentences.chunks(shard_size.max(1)).enumerate() {
                let worker = &worker;
                scope.spawn(move || worker(shard, idx as u64));
            }
        });
    }

    let result = EmbeddingMatrix {
        vectors: input.to_mat(),
        trained_epochs: config.epochs,
        seed: config.seed,
    };
    result.validate()?;
    Ok(result)
}

/// Copy selected shared rows into a local matrix where local row `i`
/// corresponds to `ids[i]`.
fn snapshot_rows(shared: &SharedMat, ids: &[u32], dim: usize, buf: &mut [f64]) -> Mat {
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        shared.read_row(id as usize, buf);
        data.extend_from_slice(&buf[..dim]);
    }
    Mat::from_vec(ids.len(), dim, data)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Write the text format: first line `|V| d`, then one `token v0 v1 ...` line
/// per vocabulary id.
pub fn save_embeddings_text(path: &Path, emb: &EmbeddingMatrix, vocab: &Vocabulary) -> Result<()> {
    if vocab.len() != emb.len() {
        return Err(Error::Dimension(format!(
            "vocabulary has {} tokens but embedding has {} rows",
            vocab.len(),
            emb.len()
        )));
    }
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", emb.len(), emb.dim()));
    for id in 0..emb.len() as u32 {
        out.push_str(vocab.token(id).expect("validated above"));
        for v in emb.row(id) {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read the text format; returns the vectors and tokens in row order.
pub fn load_embeddings_text(path: &Path) -> Result<(EmbeddingMatrix, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        what: "text embeddings".into(),
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut parts = header.split_whitespace();
    let rows: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("bad row count".into()))?;
    let dim: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("bad dimension".into()))?;

    let mut tokens = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(rows * dim);
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        tokens.push(fields.next().ok_or_else(|| bad("missing token".into()))?.to_owned());
        let mut count = 0;
        for field in fields {
            data.push(field.parse::<f64>().map_err(|e| bad(format!("bad float: {e}")))?);
            count += 1;
        }
        if count != dim {
            return Err(bad(format!("expected {dim} floats, found {count}")));
        }
    }
    if tokens.len() != rows {
        return Err(bad(format!("expected {rows} rows, found {}", tokens.len())));
    }
    let emb = EmbeddingMatrix {
        vectors: Mat::from_vec(rows, dim, data),
        trained_epochs: 0,
        seed: 0,
    };
    emb.validate()?;
    Ok((emb, tokens))
}

/// Write the binary snapshot with magic `MUSCAD-EMB-v1`.
pub fn save_embeddings_binary(path: &Path, emb: &EmbeddingMatrix, vocab: &Vocabulary) -> Result<()> {
    if vocab.len() != emb.len() {
        return Err(Error::Dimension(format!(
            "vocabulary has {} tokens but embedding has {} rows",
            vocab.len(),
            emb.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.write_all(&(emb.len() as u64).to_le_bytes()).expect("vec");
    out.write_all(&(emb.dim() as u64).to_le_bytes()).expect("vec");
    out.write_all(&(emb.trained_epochs as u64).to_le_bytes()).expect("vec");
    out.write_all(&emb.seed.to_le_bytes()).expect("vec");
    for id in 0..emb.len() as u32 {
        let token = vocab.token(id).expect("validated above").as_bytes();
        out.write_all(&(token.len() as u32).to_le_bytes()).expect("vec");
        out.write_all(token).expect("vec");
    }
    for v in emb.vectors.data() {
        out.write_all(&v.to_le_bytes()).expect("vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read the binary snapshot; returns vectors and tokens in row order.
pub fn load_embeddings_binary(path: &Path) -> Result<(EmbeddingMatrix, Vec<String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        what: "binary embeddings".into(),
        path: path.to_path_buf(),
        detail,
    };
    let mut cursor = std::io::Cursor::new(&bytes);
    let mut magic = vec![0u8; EMBEDDING_MAGIC.len()];
    cursor.read_exact(&mut magic).map_err(|_| bad("truncated magic".into()))?;
    if magic != EMBEDDING_MAGIC {
        return Err(bad("wrong magic".into()));
    }
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |cursor: &mut std::io::Cursor<&Vec<u8>>| -> Result<u64> {
        cursor.read_exact(&mut u64buf).map_err(|_| bad("truncated header".into()))?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let rows = read_u64(&mut cursor)? as usize;
    let dim = read_u64(&mut cursor)? as usize;
    let trained_epochs = read_u64(&mut cursor)? as usize;
    let seed = read_u64(&mut cursor)?;

    let mut tokens = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut len_buf = [0u8; 4];
        cursor.read_exact(&mut len_buf).map_err(|_| bad("truncated token".into()))?;
        let len = u32::from_le_bytes(len_buf) as usize;
        let mut token = vec![0u8; len];
        cursor.read_exact(&mut token).map_err(|_| bad("truncated token".into()))?;
        tokens.push(String::from_utf8(token).map_err(|e| bad(format!("bad utf8: {e}")))?);
    }
    let mut data = Vec::with_capacity(rows * dim);
    let mut f64buf = [0u8; 8];
    for _ in 0..rows * dim {
        cursor.read_exact(&mut f64buf).map_err(|_| bad("truncated data".into()))?;
        data.push(f64::from_le_bytes(f64buf));
    }
    let emb = EmbeddingMatrix {
        vectors: Mat::from_vec(rows, dim, data),
        trained_epochs,
        seed,
    };
    emb.validate()?;
    Ok((emb, tokens))
}

/// Load either format, sniffing the binary magic.
pub fn load_embeddings(path: &Path) -> Result<(EmbeddingMatrix, Vec<String>)> {
    let mut head = vec![0u8; EMBEDDING_MAGIC.len()];
    let is_binary = fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map(|_| head == EMBEDDING_MAGIC)
        .unwrap_or(false);
    if is_binary {
        load_embeddings_binary(path)
    } else {
        load_embeddings_text(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus_from_reviews, CorpusConfig, ReviewRecord};
    use crate::math::l2_norm;

    fn tiny_corpus(texts: &[String]) -> (TokenizedCorpus, Vocabulary) {
        let records: Vec<ReviewRecord> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| ReviewRecord {
                id: format!("r{i}"),
                text: Some(t.clone()),
                tokens: None,
            })
            .collect();
        let config = CorpusConfig {
            lowercase: true,
            stopwords: None,
            min_count: 1,
        };
        build_corpus_from_reviews(&records, &config).unwrap()
    }

    fn test_config() -> CbowConfig {
        CbowConfig {
            dim: 16,
            window: 2,
            negatives: 3,
            epochs: 8,
            learning_rate: 0.05,
            min_lr: 0.001,
            seed: 11,
            output: CbowOutput::NegativeSampling,
            threads: 1,
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let config = CbowConfig {
            epochs: 0,
            ..test_config()
        };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn too_many_negatives_rejected() {
        let (corpus, vocab) = tiny_corpus(&["a b".into()]);
        let config = CbowConfig {
            negatives: 5,
            ..test_config()
        };
        assert!(matches!(
            train_cbow(&corpus, &vocab, &config),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_window_stream_rejected() {
        // Every sentence has a single token: no (context, center) pair exists.
        let (corpus, vocab) = tiny_corpus(&["a".into(), "b".into(), "c".into()]);
        let config = CbowConfig {
            negatives: 1,
            ..test_config()
        };
        assert!(matches!(
            train_cbow(&corpus, &vocab, &config),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn average_context_identity_and_symmetry() {
        let emb = EmbeddingMatrix {
            vectors: Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, -2.0, -3.0]]),
            trained_epochs: 0,
            seed: 0,
        };
        assert_eq!(average_context(&emb, &[0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(average_context(&emb, &[0, 1]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert!(matches!(
            average_context(&emb, &[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn average_context_matches_direct_recomputation() {
        let rows = vec![
            vec![0.3, -1.2, 0.7],
            vec![2.0, 0.1, -0.4],
            vec![-0.5, 0.9, 1.1],
        ];
        let emb = EmbeddingMatrix {
            vectors: Mat::from_rows(&rows),
            trained_epochs: 0,
            seed: 0,
        };
        let got = average_context(&emb, &[0, 1, 2]).unwrap();
        for j in 0..3 {
            let expect = (rows[0][j] + rows[1][j] + rows[2][j]) / 3.0;
            assert!((got[j] - expect).abs() < 1e-15);
        }
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn negative_sampling_gradient_matches_finite_differences() {
        // d=16, 5-word vocabulary, window-1 style pair.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 16;
        let vocab_size = 5;
        let randmat = |rng: &mut ChaCha8Rng| {
            Mat::from_vec(
                vocab_size,
                dim,
                (0..vocab_size * dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            )
        };
        let input = randmat(&mut rng);
        let output = randmat(&mut rng);
        let context = vec![1u32, 3];
        let center = 0u32;
        let negatives = vec![2u32, 4];

        let (_, d_in_row, d_out) = ns_pair_grads(&input, &output, &context, center, &negatives);
        let step = 1e-5;

        // Input rows: every context row receives the same gradient.
        for &c in &context {
            for j in 0..dim {
                let mut plus = input.clone();
                *plus.at_mut(c as usize, j) += step;
                let mut minus = input.clone();
                *minus.at_mut(c as usize, j) -= step;
                let num = (ns_pair_loss(&plus, &output, &context, center, &negatives)
                    - ns_pair_loss(&minus, &output, &context, center, &negatives))
                    / (2.0 * step);
                assert!(
                    relative_error(num, d_in_row[j]) < 1e-4,
                    "input grad mismatch at ({c},{j}): fd={num}, analytic={}",
                    d_in_row[j]
                );
            }
        }
        // Output rows.
        for (w, grad) in &d_out {
            for j in 0..dim {
                let mut plus = output.clone();
                *plus.at_mut(*w as usize, j) += step;
                let mut minus = output.clone();
                *minus.at_mut(*w as usize, j) -= step;
                let num = (ns_pair_loss(&input, &plus, &context, center, &negatives)
                    - ns_pair_loss(&input, &minus, &context, center, &negatives))
                    / (2.0 * step);
                assert!(
                    relative_error(num, grad[j]) < 1e-4,
                    "output grad mismatch at ({w},{j}): fd={num}, analytic={}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 8;
        let vocab_size = 6;
        let randmat = |rng: &mut ChaCha8Rng| {
            Mat::from_vec(
                vocab_size,
                dim,
                (0..vocab_size * dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            )
        };
        let input = randmat(&mut rng);
        let output = randmat(&mut rng);
        let context = vec![2u32, 5];
        let center = 1u32;

        let (_, d_in_row, d_out) = softmax_pair_grads(&input, &output, &context, center);
        let step = 1e-5;
        for j in 0..dim {
            let mut plus = input.clone();
            *plus.at_mut(2, j) += step;
            let mut minus = input.clone();
            *minus.at_mut(2, j) -= step;
            let num = (softmax_pair_loss(&plus, &output, &context, center)
                - softmax_pair_loss(&minus, &output, &context, center))
                / (2.0 * step);
            assert!(relative_error(num, d_in_row[j]) < 1e-4);
        }
        for (w, grad) in &d_out {
            for j in 0..dim {
                let mut plus = output.clone();
                *plus.at_mut(*w as usize, j) += step;
                let mut minus = output.clone();
                *minus.at_mut(*w as usize, j) -= step;
                let num = (softmax_pair_loss(&input, &plus, &context, center)
                    - softmax_pair_loss(&input, &minus, &context, center))
                    / (2.0 * step);
                assert!(relative_error(num, grad[j]) < 1e-4);
            }
        }
    }

    #[test]
    fn shared_context_words_end_up_closer_than_random_ones() {
        // "good" and "great" always appear in identical contexts.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = [
            ("service was", "today"),
            ("room looked", "inside"),
            ("pool felt", "warm"),
            ("breakfast tasted", "fresh"),
        ];
        let fillers = ["parking lot full", "street noise loud", "lobby art strange"];
        let mut texts = Vec::new();
        for i in 0..200 {
            let (a, b) = frames[i % frames.len()];
            let adj = if rng.random_bool(0.5) { "good" } else { "great" };
            texts.push(format!("{a} {adj} {b}"));
            texts.push(fillers[i % fillers.len()].to_string());
        }
        let (corpus, vocab) = tiny_corpus(&texts);
        let emb = train_cbow(&corpus, &vocab, &test_config()).unwrap();

        let cos = |a: &str, b: &str| {
            crate::math::cosine(emb.row(vocab.id(a).unwrap()), emb.row(vocab.id(b).unwrap()))
                .unwrap()
        };
        let synonym = cos("good", "great");
        for other in ["parking", "noise", "lobby"] {
            assert!(
                synonym > cos("good", other),
                "cosine(good, great)={synonym} should beat cosine(good, {other})={}",
                cos("good", other)
            );
        }
    }

    #[test]
    fn seeded_single_thread_runs_are_bit_identical() {
        let (corpus, vocab) = tiny_corpus(&[
            "the pool was warm and clean".into(),
            "the room was small but tidy".into(),
            "staff were kind all day".into(),
        ]);
        let config = CbowConfig {
            epochs: 3,
            ..test_config()
        };
        let a = train_cbow(&corpus, &vocab, &config).unwrap();
        let b = train_cbow(&corpus, &vocab, &config).unwrap();
        assert_eq!(a.vectors.data(), b.vectors.data());
    }

    #[test]
    fn row_norms_stay_bounded() {
        let (corpus, vocab) = tiny_corpus(&[
            "alpha beta gamma delta".into(),
            "beta gamma delta epsilon".into(),
            "gamma delta epsilon alpha".into(),
        ]);
        let emb = train_cbow(&corpus, &vocab, &test_config()).unwrap();
        let max_norm = (0..emb.len() as u32)
            .map(|id| l2_norm(emb.row(id)))
            .fold(0.0, f64::max);
        assert!(max_norm < 100.0, "row norm diverged: {max_norm}");
    }

    #[test]
    fn parallel_training_produces_finite_embeddings() {
        let (corpus, vocab) = tiny_corpus(&[
            "alpha beta gamma delta epsilon".into(),
            "beta gamma delta epsilon zeta".into(),
            "gamma delta epsilon zeta alpha".into(),
            "delta epsilon zeta alpha beta".into(),
        ]);
        let config = CbowConfig {
            threads: 4,
            epochs: 3,
            ..test_config()
        };
        let emb = train_cbow(&corpus, &vocab, &config).unwrap();
        assert!(emb.vectors.is_finite());
        assert_eq!(emb.len(), vocab.len());
    }

    #[test]
    fn full_softmax_mode_trains() {
        let (corpus, vocab) = tiny_corpus(&["a b c d".into(), "b c d e".into()]);
        let config = CbowConfig {
            dim: 4,
            epochs: 2,
            output: CbowOutput::FullSoftmax,
            ..test_config()
        };
        let emb = train_cbow(&corpus, &vocab, &config).unwrap();
        assert!(emb.vectors.is_finite());
    }

    #[test]
    fn text_round_trip_preserves_values() {
        let (corpus, vocab) = tiny_corpus(&["a b c d".into(), "b c d e".into()]);
        let config = CbowConfig {
            dim: 4,
            epochs: 2,
            negatives: 2,
            ..test_config()
        };
        let emb = train_cbow(&corpus, &vocab, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        save_embeddings_text(&path, &emb, &vocab).unwrap();
        let (loaded, tokens) = load_embeddings(&path).unwrap();
        assert_eq!(tokens, vocab.tokens());
        assert_eq!(loaded.vectors.data(), emb.vectors.data());
    }

    #[test]
    fn binary_round_trip_preserves_metadata() {
        let (corpus, vocab) = tiny_corpus(&["a b c d".into(), "b c d e".into()]);
        let config = CbowConfig {
            dim: 4,
            epochs: 2,
            negatives: 2,
            ..test_config()
        };
        let emb = train_cbow(&corpus, &vocab, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        save_embeddings_binary(&path, &emb, &vocab).unwrap();
        let (loaded, tokens) = load_embeddings(&path).unwrap();
        assert_eq!(tokens, vocab.tokens());
        assert_eq!(loaded.vectors.data(), emb.vectors.data());
        assert_eq!(loaded.trained_epochs, emb.trained_epochs);
        assert_eq!(loaded.seed, emb.seed);
    }
}
