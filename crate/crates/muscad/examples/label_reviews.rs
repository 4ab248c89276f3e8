//! Multi-label annotation with a hand-built lexicon: a review collects the
//! union of its sentences' aspect matches.

use muscad::corpus::{build_corpus_from_reviews, CorpusConfig, ReviewRecord};
use muscad::lexicon::{label_reviews, AspectEntry, AspectLexicon, AspectTerm, Provenance};

fn main() -> muscad::Result<()> {
    let lexicon = AspectLexicon {
        aspects: [
            ("View", vec!["ocean", "sunset", "scenery"]),
            ("Service", vec!["staff", "desk", "kind"]),
            ("Pool", vec!["pool", "swim", "warm"]),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, (name, terms))| AspectEntry {
            index: i,
            category_name: name.to_string(),
            provenance: Provenance::HumanEdited,
            terms: terms
                .into_iter()
                .enumerate()
                .map(|(rank, t)| AspectTerm {
                    token: t.to_string(),
                    score: 1.0 - rank as f64 * 0.01,
                })
                .collect(),
        })
        .collect(),
    };

    let reviews = [
        ("r0", "the ocean sunset was lovely . the pool was warm"),
        ("r1", "staff at the desk were kind"),
        ("r2", "breakfast was cold"),
    ];
    let records: Vec<ReviewRecord> = reviews
        .iter()
        .map(|(id, text)| ReviewRecord {
            id: id.to_string(),
            text: Some(text.to_string()),
            tokens: None,
        })
        .collect();
    let (corpus, vocab) = build_corpus_from_reviews(
        &records,
        &CorpusConfig {
            lowercase: true,
            stopwords: None,
            min_count: 1,
        },
    )?;

    let labels = label_reviews(&corpus, &vocab, &lexicon);
    for (review, set) in &labels.labels {
        let list: Vec<&str> = set.iter().map(String::as_str).collect();
        println!("{review}: {list:?}");
    }
    println!("\nper-sentence matches:");
    for (sentence, matches) in &labels.sentence_trace {
        println!("  sentence {sentence} \"{}\":", corpus.raw_text[*sentence]);
        for (token, aspect) in matches {
            println!("    {token} -> {}", lexicon.aspects[*aspect].category_name);
        }
    }
    Ok(())
}
