//! Flipped-CLIP and ITM thresholds, score buckets, and the score of a raw
//! embedding pair.
//!
//! cargo run --example score_thresholds

use itcurate::corpus::{SampleRecord, ScoreColumn, Uid};
use itcurate::crossmodal::{clip_stage, itm_stage, pairwise_clip_score, score_bucketize, CrossModalConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> itcurate::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let records: Vec<SampleRecord> = (0..1000u128)
        .map(|i| {
            let mut r = SampleRecord::new(Uid(i + 1), "t", 1, 1);
            r.flipped_clip_score = Some(rng.gen_range(0.05..0.45));
            r.itm_score = Some(rng.gen_range(0.0..1.0));
            r
        })
        .collect();

    let mut cfg = CrossModalConfig::default();
    let clip = clip_stage(&records, &cfg)?;
    println!("flipped-CLIP >= {}: kept {}", cfg.flipped_clip_threshold, clip.selection.unique_count());

    cfg.itm_threshold = Some(0.1);
    let kept: Vec<&SampleRecord> = records.iter().filter(|r| clip.selection.contains(&r.uid)).collect();
    let itm = itm_stage(&kept, &cfg)?;
    println!(
        "ITM >= 0.1: removed {} more ({:.1}%)",
        itm.drops.len(),
        100.0 * itm.drops.len() as f64 / kept.len() as f64
    );

    let b = score_bucketize(&records, ScoreColumn::FlippedClip, &[10.0, 20.0, 30.0])?;
    for (i, bucket) in b.buckets.iter().enumerate() {
        match b.cuts.get(i) {
            Some(cut) => println!("bucket {i}: {} records, ranks below {cut}", bucket.len()),
            None => println!("remainder: {} records", bucket.len()),
        }
    }

    let img = [0.3f32, 0.9, 0.1];
    let txt = [0.2f32, 0.8, 0.4];
    println!("pairwise score: {:.4}", pairwise_clip_score(&img, &txt, 1.0)?);
    Ok(())
}
