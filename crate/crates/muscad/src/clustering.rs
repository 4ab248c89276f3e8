//! K-means over word embeddings and the aspect-matrix initializer.
//!
//! Assignment uses squared Euclidean distance on raw embeddings; centroids
//! are additionally L2-normalized, and the normalized rows stacked in cluster
//! order seed the aspect embedding matrix.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::math::{l2_norm, Mat};

#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// Word id -> cluster index, for every clustered candidate.
    pub assignments: BTreeMap<u32, usize>,
    /// Member means, one row per cluster.
    pub centroids_raw: Mat,
    /// L2-normalized centroids, one unit row per cluster.
    pub centroids_unit: Mat,
    /// Total squared distance of each point to its centroid, final state.
    pub inertia: f64,
    /// Inertia after every assignment step plus the final post-update value;
    /// non-increasing by construction.
    pub inertia_trace: Vec<f64>,
    pub k: usize,
    pub iterations_run: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Mat) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// K-means++ seeding.
fn kmeans_pp_init(points: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Mat {
    let n = points.rows();
    let mut centroids = Mat::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));

    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let x = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in min_d.iter().enumerate() {
                acc += d;
                if x < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining distances are zero (duplicate points).
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            let d = sq_dist(points.row(i), centroids.row(c));
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd iterations from explicit initial centroids.
///
/// Returns `(assignments, centroids_raw, inertia_trace, iterations_run)`.
/// The returned centroids are exact member means of the returned assignments;
/// empty clusters are re-seeded from the point farthest from its centroid.
pub fn lloyd(
    points: &Mat,
    init: Mat,
    max_iter: usize,
    tol: f64,
) -> (Vec<usize>, Mat, Vec<f64>, usize) {
    let n = points.rows();
    let k = init.rows();
    let mut centroids = init;
    let mut prev_assign: Option<Vec<usize>> = None;
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;

        // Assignment step; re-seed empty clusters until all are populated.
        let (assign, inertia) = {
            let mut assign = vec![0usize; n];
            let mut dist = vec![0.0f64; n];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                let (c, d) = nearest(points.row(i), &centroids);
                assign[i] = c;
                dist[i] = d;
                counts[c] += 1;
            }
            // An empty cluster is re-seeded from the point farthest from its
            // centroid (among clusters that keep at least one other member),
            // and that point moves across. Inertia never increases.
            while let Some(empty) = counts.iter().position(|&c| c == 0) {
                let donor = (0..n)
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]))
                    .expect("more points than clusters");
                centroids.row_mut(empty).copy_from_slice(points.row(donor));
                counts[assign[donor]] -= 1;
                assign[donor] = empty;
                counts[empty] += 1;
                dist[donor] = 0.0;
            }
            (assign, dist.iter().sum::<f64>())
        };
        trace.push(inertia);

        let converged = prev_assign.as_ref() == Some(&assign);

        // Update step: member means.
        let mut sums = Mat::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let mut moved = 0.0;
            for (j, s) in sums.row_mut(c).iter_mut().enumerate() {
                *s *= inv;
                let d = *s - centroids.at(c, j);
                moved += d * d;
            }
            shift = shift.max(moved.sqrt());
        }
        centroids = sums;
        prev_assign = Some(assign);

        if converged || shift < tol {
            break;
        }
    }

    let assign = prev_assign.expect("max_iter >= 1");
    // Final inertia against the stored member-mean centroids; never larger
    // than the last assignment-step inertia.
    let final_inertia: f64 = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(assign[i])))
        .sum();
    trace.push(final_inertia);
    (assign, centroids, trace, iterations)
}

/// Cluster the embeddings of `candidate_ids` into `k` groups.
pub fn kmeans(
    embeddings: &EmbeddingMatrix,
    k: usize,
    candidate_ids: &[u32],
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<ClusterResult> {
    if k < 2 {
        return Err(Error::Config("k must be >= 2".into()));
    }
    if candidate_ids.len() < k {
        return Err(Error::Config(format!(
            "cannot form {k} clusters from {} candidate points",
            candidate_ids.len()
        )));
    }
    if max_iter < 1 {
        return Err(Error::Config("max_iter must be >= 1".into()));
    }

    let dim = embeddings.dim();
    let mut data = Vec::with_capacity(candidate_ids.len() * dim);
    for &id in candidate_ids {
        if id as usize >= embeddings.len() {
            return Err(Error::Dimension(format!("word id {id} has no embedding row")));
        }
        data.extend_from_slice(embeddings.row(id));
    }
    let points = Mat::from_vec(candidate_ids.len(), dim, data);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_pp_init(&points, k, &mut rng);
    let (assign, centroids_raw, inertia_trace, iterations_run) =
        lloyd(&points, init, max_iter, tol);

    let mut centroids_unit = centroids_raw.clone();
    for c in 0..k {
        let norm = l2_norm(centroids_unit.row(c));
        if norm > 0.0 {
            for v in centroids_unit.row_mut(c) {
                *v /= norm;
            }
        }
    }

    let assignments: BTreeMap<u32, usize> = candidate_ids
        .iter()
        .copied()
        .zip(assign.iter().copied())
        .collect();
    let inertia = *inertia_trace.last().expect("trace non-empty");

    Ok(ClusterResult {
        assignments,
        centroids_raw,
        centroids_unit,
        inertia,
        inertia_trace,
        k,
        iterations_run,
    })
}

/// Stack the unit centroids in cluster order: the aspect-matrix initializer.
pub fn build_aspect_matrix(result: &ClusterResult) -> Mat {
    result.centroids_unit.clone()
}

/// Vocabulary ids eligible for clustering: frequency at or above the floor.
pub fn candidate_ids(vocab: &Vocabulary, frequency_floor: u64) -> Vec<u32> {
    (0..vocab.len() as u32)
        .filter(|&id| vocab.frequency(id).unwrap_or(0) >= frequency_floor)
        .collect()
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub inertia: f64,
    pub iterations_run: usize,
    pub clusters: Vec<ClusterEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub index: usize,
    pub centroid: Vec<f64>,
    pub members: Vec<ClusterMember>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterMember {
    pub token: String,
    pub distance: f64,
}

/// Per-cluster member tokens sorted by distance to the centroid.
pub fn cluster_report(
    result: &ClusterResult,
    vocab: &Vocabulary,
    embeddings: &EmbeddingMatrix,
) -> ClusterReport {
    let mut clusters: Vec<ClusterEntry> = (0..result.k)
        .map(|c| ClusterEntry {
            index: c,
            centroid: result.centroids_raw.row(c).to_vec(),
            members: Vec::new(),
        })
        .collect();
    for (&id, &c) in &result.assignments {
        let distance = sq_dist(embeddings.row(id), result.centroids_raw.row(c)).sqrt();
        clusters[c].members.push(ClusterMember {
            token: vocab.token(id).unwrap_or("<?>").to_owned(),
            distance,
        });
    }
    for entry in &mut clusters {
        entry
            .members
            .sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.token.cmp(&b.token)));
    }
    ClusterReport {
        k: result.k,
        inertia: result.inertia,
        iterations_run: result.iterations_run,
        clusters,
    }
}

pub fn save_cluster_report(path: &Path, report: &ClusterReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(path, e))
}
