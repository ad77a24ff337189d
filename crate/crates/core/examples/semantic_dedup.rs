//! Semantic deduplication inside k-means clusters, on image embeddings and
//! on joint image-text embeddings.
//!
//! cargo run --example semantic_dedup

use itcurate::align::{joint_matrix, semantic_dedup, SemDedupParams};
use itcurate::corpus::{EmbeddingMatrix, SampleRecord, ScoreColumn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> itcurate::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dim = 24;
    // Eight tight topics, each a direction plus small noise.
    let topics: Vec<Vec<f32>> = (0..8).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let rows: Vec<Vec<f32>> = (0..800)
        .map(|i| topics[i % 8].iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect())
        .collect();
    let img = EmbeddingMatrix::from_rows(&rows)?;
    let records: Vec<SampleRecord> = img
        .uids()
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let mut r = SampleRecord::new(u, "t", 1, 1);
            r.flipped_clip_score = Some(rng.gen_range(0.2..0.4));
            r.embedding_row = Some(i);
            r
        })
        .collect();
    let refs: Vec<&SampleRecord> = records.iter().collect();

    let mut params = SemDedupParams {
        k_clusters: 16,
        thre_sem: 0.04,
        score_column: ScoreColumn::FlippedClip,
        seed: 0,
        max_iters: 25,
        pairwise_cap: 10_000,
    };
    let out = semantic_dedup(&refs, &img, &params)?;
    println!("thre_sem 0.04: {} -> {} ({} groups)", records.len(), out.selection.unique_count(), out.groups.len());

    params.thre_sem = 0.999;
    let out = semantic_dedup(&refs, &img, &params)?;
    println!("thre_sem 0.999: {} -> {}", records.len(), out.selection.unique_count());

    let txt_rows: Vec<Vec<f32>> = (0..800).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let txt = EmbeddingMatrix::with_uids(&txt_rows, img.uids().to_vec(), 8)?;
    let joint = joint_matrix(&img, &txt, 0.25)?;
    let out = semantic_dedup(&refs, &joint, &params)?;
    println!("joint ({} dims), thre_sem 0.999: {} -> {}", joint.dim(), records.len(), out.selection.unique_count());
    Ok(())
}
