//! Extract ranked aspect-term lexicons from a trained model.

use muscad::aspect_model::AspectModelParams;
use muscad::clustering::{build_aspect_matrix, kmeans};
use muscad::embedding::{train_cbow, CbowConfig};
use muscad::lexicon::extract_lexicon;
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
    train(
        &mut params,
        &corpus,
        &embeddings,
        &TrainConfig {
            m_negatives: 5,
            epochs: 12,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 25,
            ..TrainConfig::default()
        },
    )?;

    let lexicon = extract_lexicon(&params, &embeddings, &vocab, 6)?;
    for aspect in &lexicon.aspects {
        println!("{} ({:?}):", aspect.category_name, aspect.provenance);
        for term in &aspect.terms {
            println!("  {:<8} {:.4}", term.token, term.score);
        }
    }
    Ok(())
}
