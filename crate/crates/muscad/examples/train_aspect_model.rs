//! Train the attention-based aspect model end to end on a planted corpus
//! and watch the max-margin loss fall.

use muscad::aspect_model::{embedding_rows, forward, AspectModelParams};
use muscad::clustering::{build_aspect_matrix, kmeans};
use muscad::embedding::{train_cbow, CbowConfig};
use muscad::synthetic::{planted_corpus, PlantedSpec};
use muscad::training::{train, TrainConfig};

fn main() -> muscad::Result<()> {
    let (corpus, vocab) = planted_corpus(&PlantedSpec {
        topics: 3,
        vocab_per_topic: 10,
        sentences_per_topic: 80,
        sentence_len: (4, 7),
        seed: 21,
    });
    let embeddings = train_cbow(
        &corpus,
        &vocab,
        &CbowConfig {
            dim: 24,
            epochs: 8,
            learning_rate: 0.05,
            min_lr: 0.001,
            seed: 22,
            ..CbowConfig::default()
        },
    )?;
    let candidates: Vec<u32> = (0..vocab.len() as u32).collect();
    let clusters = kmeans(&embeddings, 3, &candidates, 100, 1e-6, 23)?;
    let mut params = AspectModelParams::new(24, 4, build_aspect_matrix(&clusters), 24)?;

    let config = TrainConfig {
        m_negatives: 5,
        epochs: 12,
        batch_size: 32,
        learning_rate: 2e-3,
        seed: 25,
        ..TrainConfig::default()
    };
    let report = train(&mut params, &corpus, &embeddings, &config)?;
    for stats in &report.epochs {
        println!(
            "epoch {:>2}  loss {:.5}  zero-loss fraction {:.3}  grad norm {:.4}",
            stats.epoch, stats.mean_loss, stats.zero_loss_fraction, stats.grad_norm
        );
    }

    // Aspect distribution of the first few sentences.
    println!("\nsentence aspect distributions:");
    for s in 0..4 {
        let ids: Vec<u32> = corpus.in_vocab(s).collect();
        let trace = forward(&embedding_rows(&embeddings, &ids)?, &params)?;
        let probs: Vec<String> =
            trace.aspect_probs.iter().map(|p| format!("{p:.3}")).collect();
        println!("  \"{}\" -> [{}]", corpus.raw_text[s], probs.join(", "));
    }
    Ok(())
}
