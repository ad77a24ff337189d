//! Per-cluster duplication weights interpolated between w1 and w2 by score rank.
//!
//! cargo run --example quality_duplication

use itcurate::align::{interpolated_weights, quality_duplicate};
use itcurate::corpus::{SampleRecord, ScoreColumn, Uid};

fn main() -> itcurate::Result<()> {
    for n in [1, 2, 5, 8] {
        println!("N = {n}: {:?}", interpolated_weights(n, 1, 2));
    }

    let records: Vec<SampleRecord> = [0.31, 0.22, 0.45, 0.27, 0.38, 0.19]
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut r = SampleRecord::new(Uid(i as u128 + 1), "t", 1, 1);
            r.flipped_clip_score = Some(s);
            r
        })
        .collect();
    let clusters = vec![records[..4].iter().collect(), records[4..].iter().collect()];
    let sel = quality_duplicate(&clusters, 1, 2, ScoreColumn::FlippedClip)?;
    for r in &records {
        println!("{} score {:.2} -> x{}", r.uid, r.flipped_clip_score.unwrap(), sel.get(&r.uid).unwrap());
    }
    println!("{} unique, {} after duplication", sel.unique_count(), sel.total_count());
    Ok(())
}
