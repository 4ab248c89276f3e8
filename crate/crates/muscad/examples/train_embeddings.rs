//! Train CBOW embeddings on a planted-topic corpus and look at nearest
//! neighbors: words from the same topic should cluster together.

use muscad::embedding::{train_cbow, CbowConfig};
use muscad::math::cosine;
use muscad::synthetic::{planted_corpus, planted_token, PlantedSpec};

fn main() -> muscad::Result<()> {
    let spec = PlantedSpec {
        topics: 3,
        vocab_per_topic: 10,
        sentences_per_topic: 80,
        sentence_len: (4, 7),
        seed: 1,
    };
    let (corpus, vocab) = planted_corpus(&spec);

    let config = CbowConfig {
        dim: 24,
        window: 5,
        negatives: 5,
        epochs: 10,
        learning_rate: 0.05,
        min_lr: 0.001,
        seed: 2,
        ..CbowConfig::default()
    };
    let embeddings = train_cbow(&corpus, &vocab, &config)?;
    println!(
        "trained {} x {} embeddings over {} sentences",
        embeddings.len(),
        embeddings.dim(),
        corpus.n_sentences()
    );

    for topic in 0..spec.topics {
        let probe = planted_token(topic, 0);
        let probe_id = vocab.id(&probe).unwrap();
        let mut scored: Vec<(f64, &str)> = (0..vocab.len() as u32)
            .filter(|&id| id != probe_id)
            .map(|id| {
                let sim = cosine(embeddings.row(probe_id), embeddings.row(id)).unwrap();
                (sim, vocab.token(id).unwrap())
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let neighbors: Vec<&str> = scored.iter().take(4).map(|&(_, t)| t).collect();
        println!("nearest to {probe}: {neighbors:?}");
    }
    Ok(())
}
