//! Aspect model forward pass.
//!
//! A sentence's word embeddings pass through one multi-head self-attention
//! block (no biases, no positional encodings, no feed-forward sublayer). The
//! sentence vector is the token-wise elementwise product of the original
//! embeddings with the attention output, mean-pooled. A projection turns the
//! sentence vector into an aspect distribution, and the aspect matrix
//! reconstructs it as a convex combination of aspect rows.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::math::{softmax_in_place, Mat};

/// Magic header of the model snapshot.
pub const MODEL_MAGIC: &[u8] = b"MUSCAD-MODEL-v1";

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectModelParams {
    pub heads: usize,
    pub head_dim: usize,
    /// Per-head query/key/value projections, each `dim x head_dim`.
    pub wq: Vec<Mat>,
    pub wk: Vec<Mat>,
    pub wv: Vec<Mat>,
    /// Output projection, `(heads * head_dim) x dim`.
    pub wo: Mat,
    /// Aspect projection, `dim x k_aspects`.
    pub wp: Mat,
    /// Aspect embedding matrix, `k_aspects x dim`; seeded from clustering.
    pub ec: Mat,
    pub dim: usize,
    pub k_aspects: usize,
}

impl AspectModelParams {
    /// Fresh parameters: attention and projection weights drawn uniformly
    /// with 1/sqrt(fan_in) scaling, the aspect matrix taken from clustering.
    pub fn new(dim: usize, heads: usize, ec: Mat, seed: u64) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "dim {dim} must be divisible by heads {heads}"
            )));
        }
        if ec.cols() != dim {
            return Err(Error::Dimension(format!(
                "aspect matrix is {}x{}, expected columns = {dim}",
                ec.rows(),
                ec.cols()
            )));
        }
        let k_aspects = ec.rows();
        if k_aspects == 0 {
            return Err(Error::Config("aspect matrix must have at least one row".into()));
        }
        let head_dim = dim / heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Mat::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
            )
        };
        Ok(AspectModelParams {
            heads,
            head_dim,
            wq: (0..heads).map(|_| uniform(dim, head_dim)).collect(),
            wk: (0..heads).map(|_| uniform(dim, head_dim)).collect(),
            wv: (0..heads).map(|_| uniform(dim, head_dim)).collect(),
            wo: uniform(heads * head_dim, dim),
            wp: uniform(dim, k_aspects),
            ec,
            dim,
            k_aspects,
        })
    }

    /// Named views of every parameter block, in snapshot order.
    pub fn blocks(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (h, m) in self.wq.iter().enumerate() {
            out.push((format!("wq[{h}]"), m));
        }
        for (h, m) in self.wk.iter().enumerate() {
            out.push((format!("wk[{h}]"), m));
        }
        for (h, m) in self.wv.iter().enumerate() {
            out.push((format!("wv[{h}]"), m));
        }
        out.push(("wo".into(), &self.wo));
        out.push(("wp".into(), &self.wp));
        out.push(("ec".into(), &self.ec));
        out
    }

    /// Mutable counterpart of [`Self::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = Vec::new();
        for (h, m) in self.wq.iter_mut().enumerate() {
            out.push((format!("wq[{h}]"), m));
        }
        for (h, m) in self.wk.iter_mut().enumerate() {
            out.push((format!("wk[{h}]"), m));
        }
        for (h, m) in self.wv.iter_mut().enumerate() {
            out.push((format!("wv[{h}]"), m));
        }
        out.push(("wo".into(), &mut self.wo));
        out.push(("wp".into(), &mut self.wp));
        out.push(("ec".into(), &mut self.ec));
        out
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (name, block) in self.blocks() {
            if !block.is_finite() {
                return Err(Error::NonFinite {
                    what: "parameter".into(),
                    block: name,
                });
            }
        }
        Ok(())
    }
}

/// Everything a forward pass produces, kept for inspection and training.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Per-head attention weights, each `n x n` with unit row sums.
    pub attention_weights: Vec<Mat>,
    /// Attention output after the output projection, `n x dim`.
    pub context: Mat,
    /// Sentence representation, length `dim`.
    pub sentence_vec: Vec<f64>,
    /// Aspect distribution, length `k_aspects`, sums to one.
    pub aspect_probs: Vec<f64>,
    /// Aspect-aware reconstruction, length `dim`.
    pub reconstruction: Vec<f64>,
}

/// Scaled-dot-product attention per head, concatenated and projected.
/// Returns the `n x dim` context along with each head's attention weights.
pub fn multi_head_attention_with_weights(
    e: &Mat,
    params: &AspectModelParams,
) -> Result<(Mat, Vec<Mat>)> {
    let n = e.rows();
    if n == 0 {
        return Err(Error::EmptyInput("attention input has no rows".into()));
    }
    if e.cols() != params.dim {
        return Err(Error::Dimension(format!(
            "attention input has {} columns, model dim is {}",
            e.cols(),
            params.dim
        )));
    }
    let scale = 1.0 / (params.head_dim as f64).sqrt();
    let mut concat = Mat::zeros(n, params.heads * params.head_dim);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let q = e.matmul(&params.wq[h]);
        let k = e.matmul(&params.wk[h]);
        let v = e.matmul(&params.wv[h]);
        let mut scores = q.matmul_bt(&k);
        scores.scale(scale);
        for i in 0..n {
            softmax_in_place(scores.row_mut(i));
        }
        let head = scores.matmul(&v);
        for i in 0..n {
            let dst = concat.row_mut(i);
            dst[h * params.head_dim..(h + 1) * params.head_dim].copy_from_slice(head.row(i));
        }
        weights.push(scores);
    }
    Ok((concat.matmul(&params.wo), weights))
}

/// Multi-head self-attention over the sentence embedding matrix.
pub fn multi_head_attention(e: &Mat, params: &AspectModelParams) -> Result<Mat> {
    multi_head_attention_with_weights(e, params).map(|(out, _)| out)
}

/// Sentence vector: token-wise elementwise product of the embeddings with the
/// attention context, mean-pooled over tokens.
pub fn sentence_representation(e: &Mat, context: &Mat) -> Result<Vec<f64>> {
    if e.rows() == 0 {
        return Err(Error::EmptyInput("sentence has no tokens".into()));
    }
    if e.rows() != context.rows() || e.cols() != context.cols() {
        return Err(Error::Dimension(format!(
            "embedding is {}x{} but context is {}x{}",
            e.rows(),
            e.cols(),
            context.rows(),
            context.cols()
        )));
    }
    let mut z = vec![0.0; e.cols()];
    for t in 0..e.rows() {
        for ((zv, &ev), &cv) in z.iter_mut().zip(e.row(t)).zip(context.row(t)) {
            *zv += ev * cv;
        }
    }
    let inv = 1.0 / e.rows() as f64;
    for zv in &mut z {
        *zv *= inv;
    }
    Ok(z)
}

/// Aspect head: `p = softmax(wp^T z)`, `r = ec^T p`.
pub fn aspect_forward(z: &[f64], params: &AspectModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if z.len() != params.dim {
        return Err(Error::Dimension(format!(
            "sentence vector has length {}, model dim is {}",
            z.len(),
            params.dim
        )));
    }
    let mut logits = vec![0.0; params.k_aspects];
    for (i, &zv) in z.iter().enumerate() {
        for (logit, &w) in logits.iter_mut().zip(params.wp.row(i)) {
            *logit += zv * w;
        }
    }
    softmax_in_place(&mut logits);

    let mut r = vec![0.0; params.dim];
    for (k, &p) in logits.iter().enumerate() {
        for (rv, &ev) in r.iter_mut().zip(params.ec.row(k)) {
            *rv += p * ev;
        }
    }
    Ok((logits, r))
}

/// Full forward pass over one sentence's embedding rows.
pub fn forward(e: &Mat, params: &AspectModelParams) -> Result<ForwardTrace> {
    let (context, attention_weights) = multi_head_attention_with_weights(e, params)?;
    let sentence_vec = sentence_representation(e, &context)?;
    let (aspect_probs, reconstruction) = aspect_forward(&sentence_vec, params)?;
    Ok(ForwardTrace {
        attention_weights,
        context,
        sentence_vec,
        aspect_probs,
        reconstruction,
    })
}

/// Select the embedding rows of a sentence's in-vocabulary token ids.
pub fn embedding_rows(embeddings: &EmbeddingMatrix, token_ids: &[u32]) -> Result<Mat> {
    if token_ids.is_empty() {
        return Err(Error::EmptyInput("sentence has no in-vocabulary tokens".into()));
    }
    let dim = embeddings.dim();
    let mut data = Vec::with_capacity(token_ids.len() * dim);
    for &id in token_ids {
        if id as usize >= embeddings.len() {
            return Err(Error::Dimension(format!("word id {id} has no embedding row")));
        }
        data.extend_from_slice(embeddings.row(id));
    }
    Ok(Mat::from_vec(token_ids.len(), dim, data))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Write the binary model snapshot: magic, `dim`/`heads`/`k_aspects`, then
/// every parameter block row-major little-endian f64 in [`AspectModelParams::blocks`] order.
pub fn save_model(path: &Path, params: &AspectModelParams) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.write_all(&(params.dim as u64).to_le_bytes()).expect("vec");
    out.write_all(&(params.heads as u64).to_le_bytes()).expect("vec");
    out.write_all(&(params.k_aspects as u64).to_le_bytes()).expect("vec");
    for (_, block) in params.blocks() {
        for v in block.data() {
            out.write_all(&v.to_le_bytes()).expect("vec");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a snapshot written by [`save_model`].
pub fn load_model(path: &Path) -> Result<AspectModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Format {
        what: "model snapshot".into(),
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    let mut cursor = std::io::Cursor::new(&bytes);
    let mut magic = vec![0u8; MODEL_MAGIC.len()];
    cursor.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if magic != MODEL_MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |cursor: &mut std::io::Cursor<&Vec<u8>>| -> Result<u64> {
        cursor.read_exact(&mut u64buf).map_err(|_| bad("truncated header"))?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let dim = read_u64(&mut cursor)? as usize;
    let heads = read_u64(&mut cursor)? as usize;
    let k_aspects = read_u64(&mut cursor)? as usize;
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(bad("dim not divisible by heads"));
    }
    let head_dim = dim / heads;

    let mut read_mat = |rows: usize, cols: usize| -> Result<Mat> {
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            cursor.read_exact(&mut buf).map_err(|_| bad("truncated matrix data"))?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Mat::from_vec(rows, cols, data))
    };
    let wq = (0..heads).map(|_| read_mat(dim, head_dim)).collect::<Result<Vec<_>>>()?;
    let wk = (0..heads).map(|_| read_mat(dim, head_dim)).collect::<Result<Vec<_>>>()?;
    let wv = (0..heads).map(|_| read_mat(dim, head_dim)).collect::<Result<Vec<_>>>()?;
    let wo = read_mat(heads * head_dim, dim)?;
    let wp = read_mat(dim, k_aspects)?;
    let ec = read_mat(k_aspects, dim)?;

    let params = AspectModelParams {
        heads,
        head_dim,
        wq,
        wk,
        wv,
        wo,
        wp,
        ec,
        dim,
        k_aspects,
    };
    params.validate_finite()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::l2_norm;

    fn unit_rows(k: usize, dim: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mat::from_vec(
            k,
            dim,
            (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        for i in 0..k {
            let norm = l2_norm(m.row(i));
            for v in m.row_mut(i) {
                *v /= norm;
            }
        }
        m
    }

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    fn params(dim: usize, heads: usize, k: usize, seed: u64) -> AspectModelParams {
        AspectModelParams::new(dim, heads, unit_rows(k, dim, seed + 100), seed).unwrap()
    }

    #[test]
    fn dim_must_divide_heads() {
        let ec = unit_rows(2, 6, 0);
        assert!(matches!(
            AspectModelParams::new(6, 4, ec, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let p = params(4, 2, 3, 1);
        let e = random_mat(1, 4, 2);
        let (out, weights) = multi_head_attention_with_weights(&e, &p).unwrap();
        for w in &weights {
            assert_eq!(w.rows(), 1);
            assert!((w.at(0, 0) - 1.0).abs() < 1e-12);
        }
        // With a single token, each head output is just e * wv[h].
        let mut concat = Vec::new();
        for h in 0..p.heads {
            concat.extend(e.matmul(&p.wv[h]).row(0).to_vec());
        }
        let expect = Mat::from_vec(1, p.heads * p.head_dim, concat).matmul(&p.wo);
        for j in 0..4 {
            assert!((out.at(0, j) - expect.at(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_attend_identically() {
        let p = params(4, 2, 3, 3);
        let row = vec![0.4, -0.2, 0.9, 0.1];
        let e = Mat::from_rows(&[row.clone(), row.clone(), row]);
        let (_, weights) = multi_head_attention_with_weights(&e, &p).unwrap();
        for w in &weights {
            for i in 1..3 {
                for j in 0..3 {
                    assert!((w.at(i, j) - w.at(0, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_matches_step_by_step_oracle() {
        let p = params(4, 2, 3, 7);
        let e = random_mat(3, 4, 8);
        let got = multi_head_attention(&e, &p).unwrap();

        // Independent dense computation, head by head.
        let n = 3;
        let dk = p.head_dim;
        let mut concat = Mat::zeros(n, p.heads * dk);
        for h in 0..p.heads {
            let q = e.matmul(&p.wq[h]);
            let k = e.matmul(&p.wk[h]);
            let v = e.matmul(&p.wv[h]);
            for i in 0..n {
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dk).map(|t| q.at(i, t) * k.at(j, t)).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                scores = exps.into_iter().map(|x| x / sum).collect();
                for t in 0..dk {
                    let val: f64 = (0..n).map(|j| scores[j] * v.at(j, t)).sum();
                    *concat.at_mut(i, h * dk + t) = val;
                }
            }
        }
        let expect = concat.matmul(&p.wo);
        for i in 0..n {
            for j in 0..4 {
                assert!((got.at(i, j) - expect.at(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_even_for_extreme_inputs() {
        let p = params(4, 4, 3, 9);
        let mut e = random_mat(5, 4, 10);
        e.scale(1e4);
        let (_, weights) = multi_head_attention_with_weights(&e, &p).unwrap();
        for w in &weights {
            for i in 0..w.rows() {
                let sum: f64 = w.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(w.row(i).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn sentence_representation_with_unit_context_is_the_embedding_mean() {
        let e = random_mat(3, 4, 11);
        let ones = Mat::from_vec(3, 4, vec![1.0; 12]);
        let z = sentence_representation(&e, &ones).unwrap();
        for j in 0..4 {
            let mean = (e.at(0, j) + e.at(1, j) + e.at(2, j)) / 3.0;
            assert!((z[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn sentence_representation_absorbs_zero_embeddings() {
        let e = Mat::zeros(2, 4);
        let ctx = random_mat(2, 4, 12);
        let z = sentence_representation(&e, &ctx).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    #[allow(clippy::neg_multiply)]
    fn sentence_representation_matches_hand_computation() {
        let e = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]);
        let c = Mat::from_rows(&[vec![0.5, -1.0, 2.0], vec![3.0, 0.0, -1.0]]);
        let z = sentence_representation(&e, &c).unwrap();
        let expect = [
            (1.0 * 0.5 + (-1.0) * 3.0) / 2.0,
            (2.0 * -1.0 + 0.5 * 0.0) / 2.0,
            (3.0 * 2.0 + 2.0 * -1.0) / 2.0,
        ];
        for (got, want) in z.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_logits_give_uniform_aspect_distribution() {
        let mut p = params(4, 2, 4, 13);
        p.wp = Mat::zeros(4, 4); // wp^T z = 0 for every aspect
        let (probs, _) = aspect_forward(&[0.3, -0.1, 0.7, 0.2], &p).unwrap();
        for &pr in &probs {
            assert!((pr - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_one_hot_reconstructs_an_aspect_row() {
        let mut p = params(4, 2, 3, 14);
        // A huge logit on aspect 1 pins the distribution there.
        p.wp = Mat::zeros(4, 3);
        *p.wp.at_mut(0, 1) = 1e6;
        let (probs, r) = aspect_forward(&[1.0, 0.0, 0.0, 0.0], &p).unwrap();
        assert!((probs[1] - 1.0).abs() < 1e-9);
        for j in 0..4 {
            assert!((r[j] - p.ec.at(1, j)).abs() < 1e-9);
        }
    }

    #[test]
    fn reconstruction_matches_direct_combination() {
        let p = params(4, 2, 3, 15);
        let z = [0.2, -0.4, 0.8, 0.3];
        let (probs, r) = aspect_forward(&z, &p).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for j in 0..4 {
            let expect: f64 = (0..3).map(|k| probs[k] * p.ec.at(k, j)).sum();
            assert!((r[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_stays_in_the_convex_hull() {
        let p = params(6, 3, 4, 16);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (_, r) = aspect_forward(&z, &p).unwrap();
            for j in 0..6 {
                let lo = (0..4).map(|k| p.ec.at(k, j)).fold(f64::INFINITY, f64::min);
                let hi = (0..4).map(|k| p.ec.at(k, j)).fold(f64::NEG_INFINITY, f64::max);
                assert!(r[j] >= lo - 1e-12 && r[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let shift = rng.random_range(-100.0..100.0);
            let mut a = v.clone();
            softmax_in_place(&mut a);
            let mut b: Vec<f64> = v.iter().map(|x| x + shift).collect();
            softmax_in_place(&mut b);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_single_token_reduces_to_value_path() {
        let p = params(4, 1, 3, 18);
        let e = random_mat(1, 4, 19);
        let got = multi_head_attention(&e, &p).unwrap();
        let expect = e.matmul(&p.wv[0]).matmul(&p.wo);
        for j in 0..4 {
            assert!((got.at(0, j) - expect.at(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn model_snapshot_round_trips() {
        let p = params(8, 2, 3, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&path, &p).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, p);
    }

    #[test]
    fn dimension_mismatch_is_detected() {
        let p = params(4, 2, 3, 21);
        let e = random_mat(2, 5, 22);
        assert!(matches!(
            multi_head_attention(&e, &p),
            Err(Error::Dimension(_))
        ));
    }
}
