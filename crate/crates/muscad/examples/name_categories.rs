//! Category naming with the offline mapping file: no network required.
//! Point `naming.endpoint` at a chat-completion service to name aspects
//! automatically; this example uses the human-edited mapping path instead.

use muscad::lexicon::{AspectEntry, AspectLexicon, AspectTerm, Provenance};
use muscad::naming::{name_categories, NamingClientConfig, DEFAULT_PROMPT_TEMPLATE};

fn main() -> muscad::Result<()> {
    let mut lexicon = AspectLexicon {
        aspects: [
            vec!["sunset", "scenery", "harbor"],
            vec!["counter", "request", "apologize"],
        ]
        .into_iter()
        .enumerate()
        .map(|(i, terms)| AspectEntry {
            index: i,
            category_name: format!("aspect_{i}"),
            provenance: Provenance::Auto,
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

    let dir = tempfile::tempdir().expect("temp dir");
    let mapping = dir.path().join("names.json");
    std::fs::write(&mapping, r#"{"0": "View", "1": "Service"}"#).expect("write mapping");

    let candidates: Vec<String> = [
        "Cleanliness", "View", "Service", "Facilities", "Room", "Pool",
        "Parking", "Breakfast", "Amenity", "Location", "Satisfaction",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    let outcome = name_categories(
        &mut lexicon,
        DEFAULT_PROMPT_TEMPLATE,
        &candidates,
        &NamingClientConfig::default(),
        Some(&mapping),
        None,
    )?;

    println!("status: {:?}", outcome.status);
    for aspect in &lexicon.aspects {
        let terms: Vec<&str> = aspect.terms.iter().map(|t| t.token.as_str()).collect();
        println!(
            "aspect {} -> {} ({:?}): {terms:?}",
            aspect.index, aspect.category_name, aspect.provenance
        );
    }
    Ok(())
}
