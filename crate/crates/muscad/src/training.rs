//! Max-margin training of the aspect model.
//!
//! Each positive sentence is pushed toward its aspect-aware reconstruction
//! while negatively sampled sentences are pushed away:
//! `sum_n max(0, 1 - <z, r> + <z_n, r>)` with every vector L2-normalized
//! before the inner products. Gradients are derived by hand through the whole
//! pathway (attention, elementwise-product pooling, aspect softmax,
//! reconstruction, normalization) and checked against central finite
//! differences.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aspect_model::{embedding_rows, AspectModelParams};
use crate::corpus::TokenizedCorpus;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::math::{dot, l2_norm, softmax_in_place, Mat};

// ---------------------------------------------------------------------------
// Configuration and report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// How negative sentences are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Full attention pathway, same as positives.
    #[default]
    Attention,
    /// Mean of word embeddings; cheaper, no gradient through negatives.
    MeanEmbedding,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub m_negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Weight of the optional orthogonality penalty on row-normalized `ec`;
    /// zero disables it.
    #[serde(default)]
    pub ortho_reg: f64,
    #[serde(default)]
    pub negative_mode: NegativeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            m_negatives: 20,
            epochs: 15,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            seed: 42,
            ortho_reg: 0.0,
            negative_mode: NegativeMode::Attention,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_negatives < 1 {
            return Err(Error::Config("m_negatives must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        // A zero rate is accepted so a no-op pass is expressible.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.ortho_reg < 0.0 {
            return Err(Error::Config("ortho_reg must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub zero_loss_fraction: f64,
    pub grad_norm: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

// ---------------------------------------------------------------------------
// Hinge loss and negative sampling
// ---------------------------------------------------------------------------

/// `sum_n max(0, 1 - <z, r> + <z_n, r>)`; inputs must already be unit-norm.
pub fn hinge_loss(z: &[f64], r: &[f64], z_negs: &[Vec<f64>]) -> Result<f64> {
    if z_negs.is_empty() {
        return Err(Error::EmptyInput("hinge loss needs at least one negative".into()));
    }
    debug_assert!((l2_norm(z) - 1.0).abs() < 1e-9, "z must be unit-norm");
    debug_assert!((l2_norm(r) - 1.0).abs() < 1e-9, "r must be unit-norm");
    let pos = dot(z, r);
    let mut loss = 0.0;
    for zn in z_negs {
        debug_assert!((l2_norm(zn) - 1.0).abs() < 1e-9, "z_n must be unit-norm");
        loss += (1.0 - pos + dot(zn, r)).max(0.0);
    }
    Ok(loss)
}

/// `m` sentence indices excluding `exclude`, uniform without replacement.
pub fn sample_negatives(
    corpus: &TokenizedCorpus,
    m: usize,
    exclude: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    sample_excluding(corpus.n_sentences(), m, exclude, rng)
}

fn sample_excluding(n: usize, m: usize, exclude: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if n < m + 1 {
        return Err(Error::CorpusTooSmall {
            needed: m + 1,
            found: n,
        });
    }
    let mut pool: Vec<usize> = (0..n).filter(|&i| i != exclude).collect();
    for i in 0..m {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(m);
    Ok(pool)
}

// ---------------------------------------------------------------------------
// Gradient container
// ---------------------------------------------------------------------------

/// Gradients (or optimizer moments) with the same block layout as
/// [`AspectModelParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub wq: Vec<Mat>,
    pub wk: Vec<Mat>,
    pub wv: Vec<Mat>,
    pub wo: Mat,
    pub wp: Mat,
    pub ec: Mat,
}

impl ParamGrads {
    pub fn zeros_like(params: &AspectModelParams) -> Self {
        let zero = |m: &Mat| Mat::zeros(m.rows(), m.cols());
        ParamGrads {
            wq: params.wq.iter().map(zero).collect(),
            wk: params.wk.iter().map(zero).collect(),
            wv: params.wv.iter().map(zero).collect(),
            wo: zero(&params.wo),
            wp: zero(&params.wp),
            ec: zero(&params.ec),
        }
    }

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

    fn blocks_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        out.extend(self.wq.iter_mut());
        out.extend(self.wk.iter_mut());
        out.extend(self.wv.iter_mut());
        out.push(&mut self.wo);
        out.push(&mut self.wp);
        out.push(&mut self.ec);
        out
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.blocks_mut() {
            m.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks().iter().map(|(_, m)| m.frobenius_sq()).sum::<f64>().sqrt()
    }

    /// Name of the first non-finite block, if any.
    pub fn non_finite_block(&self) -> Option<String> {
        self.blocks()
            .into_iter()
            .find(|(_, m)| !m.is_finite())
            .map(|(name, _)| name)
    }
}

// ---------------------------------------------------------------------------
// Forward caches and backward pass
// ---------------------------------------------------------------------------

struct AttnCache {
    e: Mat,
    k_proj: Vec<Mat>,
    v_proj: Vec<Mat>,
    q_proj: Vec<Mat>,
    attn: Vec<Mat>,
    concat: Mat,
    z: Vec<f64>,
    z_norm: f64,
    z_hat: Vec<f64>,
}

fn forward_cache(params: &AspectModelParams, e: &Mat) -> Result<AttnCache> {
    let n = e.rows();
    let scale = 1.0 / (params.head_dim as f64).sqrt();
    let mut q_proj = Vec::with_capacity(params.heads);
    let mut k_proj = Vec::with_capacity(params.heads);
    let mut v_proj = Vec::with_capacity(params.heads);
    let mut attn = Vec::with_capacity(params.heads);
    let mut concat = Mat::zeros(n, params.heads * params.head_dim);
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
            concat.row_mut(i)[h * params.head_dim..(h + 1) * params.head_dim]
                .copy_from_slice(head.row(i));
        }
        q_proj.push(q);
        k_proj.push(k);
        v_proj.push(v);
        attn.push(scores);
    }
    let zo = concat.matmul(&params.wo);
    let mut z = vec![0.0; params.dim];
    for t in 0..n {
        for ((zv, &ev), &cv) in z.iter_mut().zip(e.row(t)).zip(zo.row(t)) {
            *zv += ev * cv;
        }
    }
    let inv = 1.0 / n as f64;
    for zv in &mut z {
        *zv *= inv;
    }
    let z_norm = l2_norm(&z);
    if z_norm == 0.0 {
        return Err(Error::NonFinite {
            what: "zero-norm sentence representation".into(),
            block: "sentence_vec".into(),
        });
    }
    let z_hat = z.iter().map(|v| v / z_norm).collect();
    Ok(AttnCache {
        e: e.clone(),
        k_proj,
        v_proj,
        q_proj,
        attn,
        concat,
        z,
        z_norm,
        z_hat,
    })
}

/// d(loss)/dx for `x_hat = x / ||x||` given the upstream gradient `g`.
fn backprop_normalize(x_hat: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let gdot = dot(g, x_hat);
    x_hat
        .iter()
        .zip(g)
        .map(|(&xh, &gv)| (gv - gdot * xh) / norm)
        .collect()
}

/// Backpropagate `d_z` (gradient w.r.t. the un-normalized sentence vector)
/// through the attention block, accumulating into `grads`.
fn backward_attention(
    params: &AspectModelParams,
    cache: &AttnCache,
    d_z: &[f64],
    grads: &mut ParamGrads,
) {
    let n = cache.e.rows();
    let inv = 1.0 / n as f64;
    let scale = 1.0 / (params.head_dim as f64).sqrt();

    // z = mean_t(e[t] * zo[t])  =>  d zo[t][j] = e[t][j] * d_z[j] / n
    let mut d_zo = Mat::zeros(n, params.dim);
    for t in 0..n {
        for (j, dv) in d_zo.row_mut(t).iter_mut().enumerate() {
            *dv = cache.e.at(t, j) * d_z[j] * inv;
        }
    }

    // zo = concat * wo
    grads.wo.add_scaled(&cache.concat.tmatmul(&d_zo), 1.0);
    let d_concat = d_zo.matmul_bt(&params.wo);

    for h in 0..params.heads {
        let dk = params.head_dim;
        let mut d_head = Mat::zeros(n, dk);
        for i in 0..n {
            d_head
                .row_mut(i)
                .copy_from_slice(&d_concat.row(i)[h * dk..(h + 1) * dk]);
        }

        // head = attn * v
        let d_attn = d_head.matmul_bt(&cache.v_proj[h]);
        let d_v = cache.attn[h].tmatmul(&d_head);
        grads.wv[h].add_scaled(&cache.e.tmatmul(&d_v), 1.0);

        // attn = row-softmax(scores)
        let mut d_scores = Mat::zeros(n, n);
        for i in 0..n {
            let a = cache.attn[h].row(i);
            let g = d_attn.row(i);
            let gdot = dot(g, a);
            for (j, dv) in d_scores.row_mut(i).iter_mut().enumerate() {
                *dv = (g[j] - gdot) * a[j];
            }
        }

        // scores = (q * k^T) * scale
        let mut d_q = d_scores.matmul(&cache.k_proj[h]);
        d_q.scale(scale);
        let mut d_k = d_scores.tmatmul(&cache.q_proj[h]);
        d_k.scale(scale);
        grads.wq[h].add_scaled(&cache.e.tmatmul(&d_q), 1.0);
        grads.wk[h].add_scaled(&cache.e.tmatmul(&d_k), 1.0);
    }
}

/// Max-margin loss of one positive sentence against its negatives, computed
/// through the same forward path the gradients differentiate.
pub fn sentence_loss(
    params: &AspectModelParams,
    positive: &Mat,
    negatives: &[Mat],
    config: &TrainConfig,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::EmptyInput("at least one negative sentence required".into()));
    }
    let pos = forward_cache(params, positive)?;
    let (_, r) = aspect_softmax(params, &pos.z);
    let r_norm = l2_norm(&r);
    if r_norm == 0.0 {
        return Err(Error::NonFinite {
            what: "zero-norm reconstruction".into(),
            block: "ec".into(),
        });
    }
    let r_hat: Vec<f64> = r.iter().map(|v| v / r_norm).collect();
    let pos_score = dot(&pos.z_hat, &r_hat);

    let mut loss = 0.0;
    for neg in negatives {
        let zn_hat = match config.negative_mode {
            NegativeMode::Attention => forward_cache(params, neg)?.z_hat,
            NegativeMode::MeanEmbedding => mean_rows_unit(neg)?,
        };
        loss += (1.0 - pos_score + dot(&zn_hat, &r_hat)).max(0.0);
    }
    if config.ortho_reg > 0.0 {
        loss += config.ortho_reg * ortho_penalty(&params.ec);
    }
    Ok(loss)
}

fn aspect_softmax(params: &AspectModelParams, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut logits = vec![0.0; params.k_aspects];
    for (i, &zv) in z.iter().enumerate() {
        for (logit, &w) in logits.iter_mut().zip(params.wp.row(i)) {
            *logit += zv * w;
        }
    }
    softmax_in_place(&mut logits);
    let mut r = vec![0.0; params.dim];
    for (k, &pk) in logits.iter().enumerate() {
        for (rv, &ev) in r.iter_mut().zip(params.ec.row(k)) {
            *rv += pk * ev;
        }
    }
    (logits, r)
}

fn mean_rows_unit(e: &Mat) -> Result<Vec<f64>> {
    let mean = crate::math::mean_rows(e);
    let norm = l2_norm(&mean);
    if norm == 0.0 {
        return Err(Error::NonFinite {
            what: "zero-norm negative representation".into(),
            block: "sentence_vec".into(),
        });
    }
    Ok(mean.into_iter().map(|v| v / norm).collect())
}

/// `||N N^T - I||_F^2` on the row-normalized aspect matrix.
fn ortho_penalty(ec: &Mat) -> f64 {
    let k = ec.rows();
    let mut n_mat = ec.clone();
    for i in 0..k {
        let norm = l2_norm(n_mat.row(i));
        for v in n_mat.row_mut(i) {
            *v /= norm;
        }
    }
    let mut penalty = 0.0;
    for i in 0..k {
        for j in 0..k {
            let m = dot(n_mat.row(i), n_mat.row(j)) - if i == j { 1.0 } else { 0.0 };
            penalty += m * m;
        }
    }
    penalty
}

fn ortho_grad(ec: &Mat, weight: f64, grads: &mut Mat) {
    let k = ec.rows();
    let d = ec.cols();
    let mut norms = Vec::with_capacity(k);
    let mut n_mat = ec.clone();
    for i in 0..k {
        let norm = l2_norm(n_mat.row(i));
        norms.push(norm);
        for v in n_mat.row_mut(i) {
            *v /= norm;
        }
    }
    // M = N N^T - I (symmetric); d penalty / d N = 4 M N.
    let mut m_mat = n_mat.matmul_bt(&n_mat);
    for i in 0..k {
        *m_mat.at_mut(i, i) -= 1.0;
    }
    let mut d_n = m_mat.matmul(&n_mat);
    d_n.scale(4.0 * weight);
    // Through row normalization.
    for i in 0..k {
        let g = d_n.row(i);
        let nh = n_mat.row(i);
        let gdot = dot(g, nh);
        for j in 0..d {
            *grads.at_mut(i, j) += (g[j] - gdot * nh[j]) / norms[i];
        }
    }
}

/// Loss, analytic gradients and the count of inactive (zero) hinge terms for
/// one positive sentence.
pub fn sentence_grads(
    params: &AspectModelParams,
    positive: &Mat,
    negatives: &[Mat],
    config: &TrainConfig,
) -> Result<(f64, ParamGrads, usize)> {
    if negatives.is_empty() {
        return Err(Error::EmptyInput("at least one negative sentence required".into()));
    }
    let mut grads = ParamGrads::zeros_like(params);

    let pos = forward_cache(params, positive)?;
    let (p, r) = aspect_softmax(params, &pos.z);
    let r_norm = l2_norm(&r);
    if r_norm == 0.0 {
        return Err(Error::NonFinite {
            what: "zero-norm reconstruction".into(),
            block: "ec".into(),
        });
    }
    let r_hat: Vec<f64> = r.iter().map(|v| v / r_norm).collect();
    let pos_score = dot(&pos.z_hat, &r_hat);

    // Negatives forward.
    enum NegRepr {
        Cached(Box<AttnCache>),
        Plain(Vec<f64>),
    }
    let mut reprs = Vec::with_capacity(negatives.len());
    for neg in negatives {
        match config.negative_mode {
            NegativeMode::Attention => reprs.push(NegRepr::Cached(Box::new(forward_cache(params, neg)?))),
            NegativeMode::MeanEmbedding => reprs.push(NegRepr::Plain(mean_rows_unit(neg)?)),
        }
    }

    let mut loss = 0.0;
    let mut zero_terms = 0;
    let mut active = vec![false; negatives.len()];
    for (i, repr) in reprs.iter().enumerate() {
        let zn_hat = match repr {
            NegRepr::Cached(c) => &c.z_hat,
            NegRepr::Plain(v) => v,
        };
        let term = 1.0 - pos_score + dot(zn_hat, &r_hat);
        if term > 0.0 {
            loss += term;
            active[i] = true;
        } else {
            zero_terms += 1;
        }
    }

    // Upstream gradients of the normalized vectors.
    let active_count = active.iter().filter(|&&a| a).count() as f64;
    let mut d_z_hat = vec![0.0; params.dim];
    let mut d_r_hat = vec![0.0; params.dim];
    for (dzh, &rh) in d_z_hat.iter_mut().zip(&r_hat) {
        *dzh = -active_count * rh;
    }
    for (i, repr) in reprs.iter().enumerate() {
        if !active[i] {
            continue;
        }
        let zn_hat = match repr {
            NegRepr::Cached(c) => &c.z_hat,
            NegRepr::Plain(v) => v,
        };
        for ((drh, &znh), &zh) in d_r_hat.iter_mut().zip(zn_hat).zip(&pos.z_hat) {
            *drh += znh - zh;
        }
    }

    // r path: through normalization, then p/ec.
    let d_r = backprop_normalize(&r_hat, r_norm, &d_r_hat);
    let mut d_p = vec![0.0; params.k_aspects];
    for (k, dp) in d_p.iter_mut().enumerate() {
        *dp = dot(params.ec.row(k), &d_r);
    }
    for (k, &pk) in p.iter().enumerate() {
        for (g, &drv) in grads.ec.row_mut(k).iter_mut().zip(&d_r) {
            *g += pk * drv;
        }
    }
    // Softmax backprop to the aspect logits, then wp and z.
    let pdot = dot(&d_p, &p);
    let d_logits: Vec<f64> = d_p.iter().zip(&p).map(|(&g, &pk)| (g - pdot) * pk).collect();
    let mut d_z = backprop_normalize(&pos.z_hat, pos.z_norm, &d_z_hat);
    for (i, dzv) in d_z.iter_mut().enumerate() {
        for (k, &dl) in d_logits.iter().enumerate() {
            grads.wp.row_mut(i)[k] += pos.z[i] * dl;
            *dzv += params.wp.at(i, k) * dl;
        }
    }

    backward_attention(params, &pos, &d_z, &mut grads);

    // Negative paths (attention mode only; the mean encoder has no parameters).
    for (i, repr) in reprs.iter().enumerate() {
        if !active[i] {
            continue;
        }
        if let NegRepr::Cached(cache) = repr {
            let d_zn = backprop_normalize(&cache.z_hat, cache.z_norm, &r_hat);
            backward_attention(params, cache, &d_zn, &mut grads);
        }
    }

    if config.ortho_reg > 0.0 {
        loss += config.ortho_reg * ortho_penalty(&params.ec);
        ortho_grad(&params.ec, config.ortho_reg, &mut grads.ec);
    }

    Ok((loss, grads, zero_terms))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[allow(clippy::large_enum_variant)]
enum OptimizerState {
    Sgd,
    Adam {
        m: ParamGrads,
        v: ParamGrads,
        t: u64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerState {
    fn new(kind: OptimizerKind, params: &AspectModelParams) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam { beta1, beta2, epsilon } => OptimizerState::Adam {
                m: ParamGrads::zeros_like(params),
                v: ParamGrads::zeros_like(params),
                t: 0,
                beta1,
                beta2,
                epsilon,
            },
        }
    }

    fn step(&mut self, params: &mut AspectModelParams, grads: &ParamGrads, lr: f64) {
        match self {
            OptimizerState::Sgd => {
                for ((_, p), (_, g)) in params.blocks_mut().into_iter().zip(grads.blocks()) {
                    p.add_scaled(g, -lr);
                }
            }
            OptimizerState::Adam {
                m,
                v,
                t,
                beta1,
                beta2,
                epsilon,
            } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for (((mb, vb), (_, g)), (_, p)) in m
                    .blocks_mut()
                    .into_iter()
                    .zip(v.blocks_mut())
                    .zip(grads.blocks())
                    .zip(params.blocks_mut())
                {
                    for ((mv, vv), (&gv, pv)) in mb
                        .data_mut()
                        .iter_mut()
                        .zip(vb.data_mut())
                        .zip(g.data().iter().zip(p.data_mut()))
                    {
                        *mv = *beta1 * *mv + (1.0 - *beta1) * gv;
                        *vv = *beta2 * *vv + (1.0 - *beta2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + *epsilon);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Optimize the model in place over the corpus; returns per-epoch statistics.
pub fn train(
    params: &mut AspectModelParams,
    corpus: &TokenizedCorpus,
    embeddings: &EmbeddingMatrix,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if embeddings.dim() != params.dim {
        return Err(Error::Dimension(format!(
            "embedding dim {} does not match model dim {}",
            embeddings.dim(),
            params.dim
        )));
    }

    // Sentences with at least one in-vocabulary token.
    let eligible: Vec<usize> = (0..corpus.n_sentences())
        .filter(|&s| corpus.in_vocab(s).next().is_some())
        .collect();
    if eligible.len() < config.m_negatives + 1 {
        return Err(Error::CorpusTooSmall {
            needed: config.m_negatives + 1,
            found: eligible.len(),
        });
    }

    // Embedding rows per eligible sentence, selected once.
    let sentence_mats: Vec<Mat> = eligible
        .iter()
        .map(|&s| {
            let ids: Vec<u32> = corpus.in_vocab(s).collect();
            embedding_rows(embeddings, &ids)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = OptimizerState::new(config.optimizer, params);
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..eligible.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_sentences = 0usize;
        let mut total_terms = 0usize;
        let mut zero_terms = 0usize;
        let mut grad_norm_sum = 0.0;
        let mut batches = 0usize;

        for batch in order.chunks(config.batch_size) {
            let mut batch_grads = ParamGrads::zeros_like(params);
            let mut batch_loss = 0.0;
            for &pos_idx in batch {
                let neg_positions =
                    sample_excluding(eligible.len(), config.m_negatives, pos_idx, &mut rng)?;
                let negatives: Vec<Mat> =
                    neg_positions.iter().map(|&i| sentence_mats[i].clone()).collect();
                let (loss, grads, zeros) =
                    sentence_grads(params, &sentence_mats[pos_idx], &negatives, config)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: "loss".into(),
                        block: "hinge".into(),
                    });
                }
                batch_loss += loss;
                batch_grads.add_assign(&grads);
                zero_terms += zeros;
                total_terms += config.m_negatives;
            }
            batch_grads.scale(1.0 / batch.len() as f64);
            if let Some(block) = batch_grads.non_finite_block() {
                return Err(Error::NonFinite {
                    what: "gradient".into(),
                    block,
                });
            }
            grad_norm_sum += batch_grads.global_norm();
            batches += 1;
            optimizer.step(params, &batch_grads, config.learning_rate);
            epoch_loss += batch_loss;
            epoch_sentences += batch.len();
        }

        report.epochs.push(EpochStats {
            epoch,
            mean_loss: epoch_loss / epoch_sentences as f64,
            zero_loss_fraction: zero_terms as f64 / total_terms as f64,
            grad_norm: grad_norm_sum / batches as f64,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }

    params.validate_finite()?;
    Ok(report)
}

/// Aspect index with the highest probability for each eligible sentence.
pub fn predict_aspects(
    params: &AspectModelParams,
    corpus: &TokenizedCorpus,
    embeddings: &EmbeddingMatrix,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::new();
    for s in 0..corpus.n_sentences() {
        let ids: Vec<u32> = corpus.in_vocab(s).collect();
        if ids.is_empty() {
            continue;
        }
        let e = embedding_rows(embeddings, &ids)?;
        let trace = crate::aspect_model::forward(&e, params)?;
        out.push((s, trace.aspect_probs));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::normalized;

    fn unit(v: &[f64]) -> Vec<f64> {
        normalized(v).unwrap()
    }

    fn random_unit_rows(k: usize, dim: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| unit(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        Mat::from_rows(&rows)
    }

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn hinge_loss_margin_satisfied_exactly() {
        let z = vec![1.0, 0.0];
        let r = vec![1.0, 0.0];
        let neg = vec![vec![0.0, 1.0]];
        assert_eq!(hinge_loss(&z, &r, &neg).unwrap(), 0.0);
    }

    #[test]
    fn hinge_loss_orthogonal_case() {
        let z = vec![0.0, 1.0];
        let r = vec![1.0, 0.0];
        let neg = vec![vec![0.0, -1.0]];
        assert_eq!(hinge_loss(&z, &r, &neg).unwrap(), 1.0);
    }

    #[test]
    fn hinge_loss_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut random_unit = |dim: usize| {
            unit(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
        };
        let z = random_unit(5);
        let r = random_unit(5);
        let negs: Vec<Vec<f64>> = (0..3).map(|_| random_unit(5)).collect();
        let got = hinge_loss(&z, &r, &negs).unwrap();
        let mut expect = 0.0;
        for n in &negs {
            let term = 1.0 - dot(&z, &r) + dot(n, &r);
            if term > 0.0 {
                expect += term;
            }
        }
        assert!((got - expect).abs() < 1e-12);
        assert!(got >= 0.0);
    }

    #[test]
    fn empty_negatives_rejected() {
        assert!(matches!(
            hinge_loss(&[1.0, 0.0], &[1.0, 0.0], &[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[allow(clippy::single_range_in_vec_init)]
    fn two_sentence_corpus() -> TokenizedCorpus {
        TokenizedCorpus {
            sentences: vec![vec![0], vec![1]],
            review_bounds: vec![0..1, 1..2],
            review_ids: vec!["a".into(), "b".into()],
            raw_text: vec!["x".into(), "y".into()],
        }
    }

    #[test]
    fn sampling_the_only_choice() {
        let corpus = two_sentence_corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_negatives(&corpus, 1, 0, &mut rng).unwrap(), vec![1]);
    }

    #[test]
    #[allow(clippy::single_range_in_vec_init)]
    fn sampling_exhausts_all_other_indices() {
        let corpus = TokenizedCorpus {
            sentences: vec![vec![0]; 5],
            review_bounds: vec![0..5],
            review_ids: vec!["r".into()],
            raw_text: vec![String::new(); 5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut got = sample_negatives(&corpus, 4, 2, &mut rng).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 3, 4]);
    }

    #[test]
    #[allow(clippy::single_range_in_vec_init)]
    fn sampling_is_close_to_uniform() {
        let corpus = TokenizedCorpus {
            sentences: vec![vec![0]; 10],
            review_bounds: vec![0..10],
            review_ids: vec!["r".into()],
            raw_text: vec![String::new(); 10],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = [0u32; 10];
        let draws = 1000;
        let m = 3;
        for _ in 0..draws {
            for i in sample_negatives(&corpus, m, 0, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        // Each of the nine candidates: p = 3/9, sigma = sqrt(n p (1-p)).
        let p = m as f64 / 9.0;
        let expect = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts[1..] {
            assert!(
                (c as f64 - expect).abs() < 3.0 * sigma,
                "count {c} outside 3 sigma of {expect}"
            );
        }
    }

    #[test]
    fn corpus_too_small_for_sampling() {
        let corpus = two_sentence_corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_negatives(&corpus, 2, 0, &mut rng),
            Err(Error::CorpusTooSmall { .. })
        ));
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        // Denominator floor covers finite-difference noise on near-zero
        // gradients (absolute error around 1e-11 at step 1e-5).
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central finite differences over every parameter scalar.
    fn finite_difference_check(
        params: &AspectModelParams,
        positive: &Mat,
        negatives: &[Mat],
        config: &TrainConfig,
    ) {
        let (loss, grads, _) = sentence_grads(params, positive, negatives, config).unwrap();
        assert!(loss.is_finite());
        let step = 1e-5;
        let analytic = grads.blocks();
        for (block_idx, (name, block)) in params.blocks().iter().enumerate() {
            for idx in 0..block.data().len() {
                let perturbed = |delta: f64| {
                    let mut p = params.clone();
                    p.blocks_mut()[block_idx].1.data_mut()[idx] += delta;
                    sentence_loss(&p, positive, negatives, config).unwrap()
                };
                let numeric = (perturbed(step) - perturbed(-step)) / (2.0 * step);
                let a = analytic[block_idx].1.data()[idx];
                if numeric.abs() < 1e-10 && a.abs() < 1e-10 {
                    continue;
                }
                assert!(
                    relative_error(numeric, a) < 1e-4,
                    "{name}[{idx}]: fd={numeric}, analytic={a}"
                );
            }
        }
    }

    /// Instances whose hinge terms sit near the kink are rejected: the loss
    /// is not differentiable there and finite differences are meaningless.
    fn margin_is_clear(
        params: &AspectModelParams,
        positive: &Mat,
        negatives: &[Mat],
        config: &TrainConfig,
    ) -> bool {
        let pos = forward_cache(params, positive).unwrap();
        let (_, r) = aspect_softmax(params, &pos.z);
        let r_hat = unit(&r);
        let pos_score = dot(&pos.z_hat, &r_hat);
        negatives.iter().all(|neg| {
            let zn_hat = match config.negative_mode {
                NegativeMode::Attention => forward_cache(params, neg).unwrap().z_hat,
                NegativeMode::MeanEmbedding => mean_rows_unit(neg).unwrap(),
            };
            (1.0 - pos_score + dot(&zn_hat, &r_hat)).abs() > 1e-3
        })
    }

    #[test]
    fn gradients_match_finite_differences() {
        // d=8, K=3, every head count that divides 8, sentences of 1-4 tokens.
        let config_base = TrainConfig {
            m_negatives: 2,
            learning_rate: 0.1,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 6 {
            seed += 1;
            let heads = [1, 2, 4][checked % 3];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params =
                AspectModelParams::new(8, heads, random_unit_rows(3, 8, seed + 500), seed).unwrap();
            let positive = random_mat(rng.random_range(1..=4), 8, seed + 1000);
            let negatives: Vec<Mat> = (0..2)
                .map(|i| random_mat(rng.random_range(1..=4), 8, seed + 2000 + i))
                .collect();
            let config = TrainConfig {
                negative_mode: if checked % 2 == 0 {
                    NegativeMode::Attention
                } else {
                    NegativeMode::MeanEmbedding
                },
                ortho_reg: if checked == 5 { 0.1 } else { 0.0 },
                ..config_base.clone()
            };
            if !margin_is_clear(&params, &positive, &negatives, &config) {
                continue;
            }
            finite_difference_check(&params, &positive, &negatives, &config);
            checked += 1;
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (corpus, vocab) = crate::synthetic::planted_corpus(&crate::synthetic::PlantedSpec {
            topics: 2,
            vocab_per_topic: 6,
            sentences_per_topic: 10,
            sentence_len: (3, 5),
            seed: 1,
        });
        let emb = crate::synthetic::random_embeddings(vocab.len(), 8, 2);
        let ec = random_unit_rows(2, 8, 3);
        let mut params = AspectModelParams::new(8, 2, ec, 4).unwrap();
        let before = params.clone();
        let config = TrainConfig {
            m_negatives: 2,
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.0,
            optimizer: OptimizerKind::Sgd,
            seed: 5,
            ..TrainConfig::default()
        };
        train(&mut params, &corpus, &emb, &config).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    #[allow(clippy::single_range_in_vec_init)]
    fn single_sentence_corpus_is_rejected() {
        let corpus = TokenizedCorpus {
            sentences: vec![vec![0, 1]],
            review_bounds: vec![0..1],
            review_ids: vec!["a".into()],
            raw_text: vec!["x y".into()],
        };
        let emb = crate::synthetic::random_embeddings(2, 8, 1);
        let mut params = AspectModelParams::new(8, 2, random_unit_rows(2, 8, 2), 3).unwrap();
        let config = TrainConfig {
            m_negatives: 1,
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut params, &corpus, &emb, &config),
            Err(Error::CorpusTooSmall { .. })
        ));
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let (corpus, vocab) = crate::synthetic::planted_corpus(&crate::synthetic::PlantedSpec {
            topics: 2,
            vocab_per_topic: 8,
            sentences_per_topic: 12,
            sentence_len: (3, 6),
            seed: 6,
        });
        let emb = crate::synthetic::random_embeddings(vocab.len(), 8, 7);
        let config = TrainConfig {
            m_negatives: 3,
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut params =
                AspectModelParams::new(8, 2, random_unit_rows(2, 8, 10), 11).unwrap();
            let report = train(&mut params, &corpus, &emb, &config).unwrap();
            (params, report)
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        assert_eq!(pa, pb);
        let losses_a: Vec<f64> = ra.epochs.iter().map(|e| e.mean_loss).collect();
        let losses_b: Vec<f64> = rb.epochs.iter().map(|e| e.mean_loss).collect();
        assert_eq!(losses_a, losses_b);
    }

    #[test]
    fn planted_topics_are_recovered_with_high_purity() {
        let spec = crate::synthetic::PlantedSpec {
            topics: 3,
            vocab_per_topic: 12,
            sentences_per_topic: 100,
            sentence_len: (4, 7),
            seed: 21,
        };
        let (corpus, vocab) = crate::synthetic::planted_corpus(&spec);
        let emb = crate::embedding::train_cbow(
            &corpus,
            &vocab,
            &crate::embedding::CbowConfig {
                dim: 24,
                window: 5,
                negatives: 5,
                epochs: 10,
                learning_rate: 0.05,
                min_lr: 0.001,
                seed: 22,
                ..Default::default()
            },
        )
        .unwrap();
        let ids: Vec<u32> = (0..vocab.len() as u32).collect();
        let clusters = crate::clustering::kmeans(&emb, 3, &ids, 100, 1e-6, 23).unwrap();
        let ec = crate::clustering::build_aspect_matrix(&clusters);
        let mut params = AspectModelParams::new(24, 4, ec, 24).unwrap();
        let config = TrainConfig {
            m_negatives: 5,
            epochs: 10,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 25,
            ..TrainConfig::default()
        };
        let report = train(&mut params, &corpus, &emb, &config).unwrap();

        // Loss is non-increasing in moving average; zero-loss fraction grows.
        let n = report.epochs.len();
        let first: f64 =
            report.epochs[..3].iter().map(|e| e.mean_loss).sum::<f64>() / 3.0;
        let last: f64 =
            report.epochs[n - 3..].iter().map(|e| e.mean_loss).sum::<f64>() / 3.0;
        assert!(last <= first, "mean loss should fall: first={first}, last={last}");
        assert!(
            report.epochs[n - 1].zero_loss_fraction >= report.epochs[0].zero_loss_fraction,
            "zero-loss fraction should not shrink"
        );

        // Sentence purity of argmax p against the planted topic.
        let predictions = predict_aspects(&params, &corpus, &emb).unwrap();
        let topic_of = |s: usize| crate::synthetic::planted_topic_of_sentence(&spec, s);
        let mut counts = vec![vec![0usize; spec.topics]; 3];
        for (s, probs) in &predictions {
            let aspect = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            counts[aspect][topic_of(*s)] += 1;
        }
        let total: usize = counts.iter().flatten().sum();
        let majority: usize = counts.iter().map(|row| row.iter().max().unwrap()).sum();
        let purity = majority as f64 / total as f64;
        assert!(purity >= 0.9, "sentence purity {purity} below 0.9");
    }
}
