//! IVF-PQ index over image embeddings, then near-duplicate removal.
//!
//! Exact copies with the same caption keep one member; near copies scored at
//! or below gamma are removed as someone's duplicate.
//!
//! cargo run --example near_duplicates

use itcurate::ann::{build_index, near_duplicate_removal, DedupConfig, IvfPqIndex, IvfPqParams};
use itcurate::corpus::{EmbeddingMatrix, SampleRecord, Uid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> itcurate::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut push = |v: Vec<f32>, text: String, score: f64, rows: &mut Vec<Vec<f32>>| {
        let uid = Uid(rows.len() as u128 + 1);
        let mut r = SampleRecord::new(uid, text, 512, 512);
        r.flipped_clip_score = Some(score);
        r.embedding_row = Some(rows.len());
        rows.push(v);
        records.push(r);
    };
    for i in 0..1000 {
        let v: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let score = rng.gen_range(0.0..0.5);
        if i % 50 == 0 {
            // Three exact copies sharing a caption and a good score.
            for _ in 0..3 {
                push(v.clone(), format!("copied caption {i}"), 0.35, &mut rows);
            }
        } else {
            push(v, format!("caption {i}"), score, &mut rows);
        }
    }
    let uids = records.iter().map(|r| r.uid).collect();
    let x = EmbeddingMatrix::with_uids(&rows, uids, 32)?;

    let params = IvfPqParams::desk_scale(x.len());
    println!("{params:?}");
    let index = build_index(&x, params, 0)?;

    let path = std::env::temp_dir().join("itcurate-example.ivfpq");
    index.save(&path)?;
    let index = IvfPqIndex::load(&path)?;
    let _ = std::fs::remove_file(&path);

    let out = near_duplicate_removal(&records, &x, &index, &DedupConfig::default())?;
    println!(
        "{} records -> {} kept, {} marked as duplicates",
        records.len(),
        out.selection.unique_count(),
        out.removed.len()
    );
    let mut reasons = std::collections::BTreeMap::new();
    for (_, r) in &out.drops {
        *reasons.entry(*r).or_insert(0) += 1;
    }
    println!("drop reasons: {reasons:?}");
    Ok(())
}
