//! Cluster word embeddings with k-means and print the discovered groups;
//! the unit centroids seed the aspect matrix.

use muscad::clustering::{build_aspect_matrix, cluster_report, kmeans};
use muscad::embedding::{train_cbow, CbowConfig};
use muscad::synthetic::{planted_corpus, PlantedSpec};

fn main() -> muscad::Result<()> {
    let (corpus, vocab) = planted_corpus(&PlantedSpec {
        topics: 3,
        vocab_per_topic: 8,
        sentences_per_topic: 80,
        sentence_len: (4, 7),
        seed: 5,
    });
    let embeddings = train_cbow(
        &corpus,
        &vocab,
        &CbowConfig {
            dim: 24,
            epochs: 10,
            learning_rate: 0.05,
            min_lr: 0.001,
            seed: 6,
            ..CbowConfig::default()
        },
    )?;

    let candidates: Vec<u32> = (0..vocab.len() as u32).collect();
    let result = kmeans(&embeddings, 3, &candidates, 100, 1e-6, 7)?;
    println!(
        "k={} converged after {} iterations, inertia {:.4}",
        result.k, result.iterations_run, result.inertia
    );

    let report = cluster_report(&result, &vocab, &embeddings);
    for cluster in &report.clusters {
        let members: Vec<&str> = cluster.members.iter().map(|m| m.token.as_str()).collect();
        println!("cluster {}: {members:?}", cluster.index);
    }

    let aspect_matrix = build_aspect_matrix(&result);
    println!(
        "aspect matrix seed: {} rows x {} columns, unit-norm rows",
        aspect_matrix.rows(),
        aspect_matrix.cols()
    );
    Ok(())
}
