//! Caption rules: PoS patterns, high-frequency texts, bad patterns and
//! language scores, plus the optional heuristics.
//!
//! cargo run --example caption_rules

use std::collections::BTreeMap;

use itcurate::corpus::{SampleRecord, Uid};
use itcurate::unimodal::{
    apply_text_rules, bad_pattern_review_candidates, high_frequency_texts, pos_pattern, OptionalTextRules,
    TextRuleConfig,
};

fn record(i: u128, text: &str, tags: &[&str], lang: &[(&str, f64)]) -> SampleRecord {
    let mut r = SampleRecord::new(Uid(i), text, 640, 480);
    r.pos_tags = Some(tags.iter().map(|t| t.to_string()).collect());
    r.lang_scores = Some(lang.iter().map(|(l, s)| (l.to_string(), *s)).collect::<BTreeMap<_, _>>());
    r
}

fn main() -> itcurate::Result<()> {
    let en = [("en", 0.93)];
    let records = vec![
        record(1, "a dog running on the beach", &["DET", "NOUN", "VERB", "ADP", "DET", "NOUN"], &en),
        record(2, "it.", &["PRON", "PUNCT"], &en),
        record(3, "image", &["NOUN"], &en),
        record(4, "IMG_2041.JPG", &["PROPN"], &[("en", 0.1)]),
        record(5, "ein Hund am Strand", &["DET", "NOUN", "ADP", "NOUN"], &[("en", 0.05), ("de", 0.91)]),
        record(6, "sunset sunset sunset", &["NOUN"], &en),
    ];
    println!("pattern of record 2: {}", pos_pattern(records[1].pos_tags.as_ref().unwrap())?);

    let repeated: Vec<SampleRecord> = (0..1200).map(|i| record(100 + i, "image", &["NOUN"], &en)).collect();
    for (text, n) in high_frequency_texts(repeated.iter().chain(&records), 1000) {
        println!("high-frequency text {text:?} x{n}");
    }
    for r in bad_pattern_review_candidates(&records, 0.2) {
        println!("review candidate for a bad pattern: {:?}", r.text);
    }

    let rules = TextRuleConfig {
        highfreq_blocklist: ["image".to_string()].into(),
        english_threshold: Some(0.5),
        default_lang_threshold: Some(0.5),
        optional: OptionalTextRules {
            min_unique_token_ratio: Some(0.5),
            ..Default::default()
        },
        ..Default::default()
    }
    .with_pos_patterns(["PRON,PUNCT"])?
    .with_bad_patterns([r"(?i)^img_\d+\.jpe?g$"])?;
    rules.validate()?;

    for r in &records {
        println!("{:<30} {:?}", r.text, apply_text_rules(r, &rules));
    }
    Ok(())
}
