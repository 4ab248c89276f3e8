//! Build a corpus from JSONL reviews and inspect vocabulary and
//! co-occurrence statistics.

use muscad::corpus::{
    build_corpus_from_reviews, compute_cooc_stats, CorpusConfig, ReviewRecord,
};

fn main() -> muscad::Result<()> {
    let reviews = [
        ("h1", "great pool . loved the pool"),
        ("h2", "the room had an ocean view"),
        ("h3", "staff were kind . room was clean"),
        ("h4", "pool view from the room"),
    ];
    let records: Vec<ReviewRecord> = reviews
        .iter()
        .map(|(id, text)| ReviewRecord {
            id: id.to_string(),
            text: Some(text.to_string()),
            tokens: None,
        })
        .collect();

    let config = CorpusConfig {
        lowercase: true,
        stopwords: None,
        min_count: 1,
    };
    let (corpus, vocab) = build_corpus_from_reviews(&records, &config)?;

    println!(
        "{} reviews, {} sentences, {} vocabulary words",
        corpus.n_reviews(),
        corpus.n_sentences(),
        vocab.len()
    );
    for id in 0..vocab.len() as u32 {
        println!(
            "  id {id:>2}  {:<8} freq {}",
            vocab.token(id).unwrap(),
            vocab.frequency(id).unwrap()
        );
    }

    let stats = compute_cooc_stats(&corpus, 5)?;
    let pool = vocab.id("pool").unwrap();
    let view = vocab.id("view").unwrap();
    println!(
        "\n{} windows over {} documents",
        stats.total_windows, stats.total_docs
    );
    println!(
        "pool/view: {} shared windows, {} shared documents",
        stats.pair_count(pool, view),
        stats.doc_pair_count(pool, view)
    );
    Ok(())
}
