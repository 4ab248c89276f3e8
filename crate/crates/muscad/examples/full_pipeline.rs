//! The whole pipeline through the orchestration API: preprocess, embed,
//! cluster, train, lexicon, label, evaluate — one config, one workdir.

use std::fs;

use muscad::pipeline::{cmd_pipeline, PipelineContext, RunOptions};
use muscad::synthetic::{planted_reviews, PlantedSpec};

fn main() -> muscad::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");

    // Fixture corpus: three disjoint topics.
    let mut jsonl = String::new();
    for record in planted_reviews(&PlantedSpec {
        topics: 3,
        vocab_per_topic: 12,
        sentences_per_topic: 40,
        sentence_len: (4, 7),
        seed: 41,
    }) {
        jsonl.push_str(&serde_json::to_string(&record)?);
        jsonl.push('\n');
    }
    fs::write(dir.path().join("reviews.jsonl"), jsonl).expect("write fixture");

    let config = serde_json::json!({
        "input": "reviews.jsonl",
        "workdir": "out",
        "seed": 42,
        "corpus": {"min_count": 1, "window_size": 5},
        "embedding": {"dim": 16, "epochs": 4, "negatives": 3,
                      "learning_rate": 0.05, "min_lr": 0.001},
        "clustering": {"k": 3, "frequency_floor": 1},
        "training": {"heads": 2, "m_negatives": 3, "epochs": 3,
                     "batch_size": 16, "learning_rate": 0.002},
        "lexicon": {"top_n": 8},
        "metrics": {"top_n": 5, "window": 5}
    });
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, config.to_string()).expect("write config");

    let ctx = PipelineContext::load(&config_path, &[], RunOptions::default())?;
    let outcome = cmd_pipeline(&ctx)?;
    println!("pipeline wrote {} artifacts:", outcome.artifacts.len());
    for artifact in &outcome.artifacts {
        println!("  {}", artifact.file_name().unwrap().to_string_lossy());
    }

    let evaluation = fs::read_to_string(dir.path().join("out/evaluation.txt"))
        .expect("evaluation artifact");
    println!("\n{evaluation}");
    Ok(())
}
