//! Reads a JSONL metadata file with two bad lines, shows that a missing
//! declared column is fatal, then round-trips a selection through its text form.
//!
//! cargo run --example ingest_metadata

use itcurate::corpus::{
    ingest_metadata, read_selection, write_metadata, write_selection, ColumnSchema, IngestOptions, SampleRecord,
    SelectionSet, Uid,
};

fn main() -> itcurate::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("metadata.jsonl");

    let records: Vec<SampleRecord> = (1..=9u128)
        .map(|i| {
            let mut r = SampleRecord::new(Uid(i), format!("a photo of item {i}"), 640, 480);
            r.flipped_clip_score = Some(0.1 * i as f64 / 3.0);
            r
        })
        .collect();
    write_metadata(&path, &records)?;
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{not json\n");
    text.push_str(r#"{"uid":"000000000000000000000000000000fe","text":"x","image_width":0,"image_height":1,"flipped_clip_score":0.3}"#);
    text.push('\n');
    std::fs::write(&path, &text).unwrap();

    let schema = ColumnSchema::base().with("flipped_clip_score");
    let ingested = ingest_metadata(&path, &schema, &IngestOptions { max_reject_rate: 0.2 })?;
    println!("{} lines, {} accepted", ingested.report.lines, ingested.report.accepted);
    for r in &ingested.report.rejected {
        println!("  line {}: {}", r.line, r.reason);
    }

    let missing = dir.path().join("missing.jsonl");
    std::fs::write(&missing, r#"{"uid":"000000000000000000000000000000ff","text":"x","image_width":1,"image_height":1}"#).unwrap();
    if let Err(e) = ingest_metadata(&missing, &schema, &IngestOptions::default()) {
        println!("missing declared column: {e}");
    }

    let mut sel = SelectionSet::from_uids("example", ingested.records.iter().map(|r| r.uid));
    sel.insert(Uid(3), 2)?;
    let sel_path = dir.path().join("out.sel");
    write_selection(&sel, &sel_path)?;
    let back = read_selection(&sel_path, "reloaded")?;
    assert_eq!(back, sel);
    println!("{} unique, {} with duplicates", back.unique_count(), back.total_count());
    print!("{}", std::fs::read_to_string(&sel_path).unwrap().lines().take(3).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
