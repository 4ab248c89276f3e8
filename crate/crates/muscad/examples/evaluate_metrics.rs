//! Score a lexicon with the unsupervised metric suite and compare models by
//! rank average.

use muscad::aspect_model::AspectModelParams;
use muscad::clustering::{build_aspect_matrix, kmeans};
use muscad::corpus::compute_cooc_stats;
use muscad::embedding::{train_cbow, CbowConfig};
use muscad::lexicon::extract_lexicon;
use muscad::metrics::{coherence_report, format_metric_table, CoherenceOptions, TableRow};
use muscad::synthetic::{planted_corpus, PlantedSpec};
use muscad::training::{train, TrainConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() -> muscad::Result<()> {
    let (corpus, vocab) = planted_corpus(&PlantedSpec {
        topics: 3,
        vocab_per_topic: 10,
        sentences_per_topic: 80,
        sentence_len: (4, 7),
        seed: 31,
    });
    let embeddings = train_cbow(
        &corpus,
        &vocab,
        &CbowConfig {
            dim: 24,
            epochs: 10,
            learning_rate: 0.05,
            min_lr: 0.001,
            seed: 32,
            ..CbowConfig::default()
        },
    )?;
    let candidates: Vec<u32> = (0..vocab.len() as u32).collect();
    let clusters = kmeans(&embeddings, 3, &candidates, 100, 1e-6, 33)?;
    let mut params = AspectModelParams::new(24, 4, build_aspect_matrix(&clusters), 34)?;
    train(
        &mut params,
        &corpus,
        &embeddings,
        &TrainConfig {
            m_negatives: 5,
            epochs: 8,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 35,
            ..TrainConfig::default()
        },
    )?;

    let stats = compute_cooc_stats(&corpus, 10)?;
    let opts = CoherenceOptions {
        top_n: 8,
        ..CoherenceOptions::default()
    };

    // The trained lexicon against a shuffled-terms baseline.
    let trained = extract_lexicon(&params, &embeddings, &vocab, 8)?;
    let trained_report = coherence_report(&trained, &stats, &embeddings, &vocab, &opts)?;

    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let mut shuffled = trained.clone();
    let mut all_terms: Vec<_> =
        shuffled.aspects.iter().flat_map(|a| a.terms.clone()).collect();
    all_terms.shuffle(&mut rng);
    for (i, aspect) in shuffled.aspects.iter_mut().enumerate() {
        aspect.terms = all_terms[i * 8..(i + 1) * 8].to_vec();
        aspect
            .terms
            .sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.token.cmp(&b.token)));
    }
    let shuffled_report = coherence_report(&shuffled, &stats, &embeddings, &vocab, &opts)?;

    let rows = vec![
        TableRow {
            name: "trained".into(),
            npmi: trained_report.mean_npmi,
            umass: trained_report.mean_umass,
            diversity: trained_report.diversity,
            ec: Some(trained_report.embedding_coherence),
        },
        TableRow {
            name: "shuffled".into(),
            npmi: shuffled_report.mean_npmi,
            umass: shuffled_report.mean_umass,
            diversity: shuffled_report.diversity,
            ec: Some(shuffled_report.embedding_coherence),
        },
    ];
    print!("{}", format_metric_table(&rows));
    Ok(())
}
