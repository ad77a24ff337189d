//! Cluster importance from downstream task images, then importance-based
//! selection of 20% of a corpus.
//!
//! cargo run --example cluster_importance

use itcurate::align::{cids_select, cluster_importance, cluster_size_histogram};
use itcurate::corpus::{EmbeddingMatrix, SampleRecord, ScoreColumn, Uid};
use itcurate::vector::{kmeans_fit, ClusterModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> itcurate::Result<()> {
    // The two-centroid case: one image on a centroid, one between both.
    let toy = ClusterModel::from_centroids(2, vec![1.0, 0.0, 0.0, 1.0])?;
    let task = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]])?;
    println!("toy importance: {:?}", cluster_importance(&toy, &[task], 0.72)?.weights);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let angle = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| {
        let t = rng.gen_range(lo..hi);
        vec![t.cos(), t.sin()]
    };
    let rows: Vec<Vec<f32>> = (0..2000).map(|_| angle(&mut rng, 0.0, std::f32::consts::TAU)).collect();
    let x = EmbeddingMatrix::from_rows(&rows)?;
    let records: Vec<SampleRecord> = x
        .uids()
        .iter()
        .map(|&u| {
            let mut r = SampleRecord::new(u, "t", 1, 1);
            r.flipped_clip_score = Some(rng.gen_range(0.2..0.4));
            r
        })
        .collect();

    let model = kmeans_fit(&x, 12, 25, 0)?;
    let labels = model.assign(&x)?;
    // Downstream images concentrated on one side of the circle.
    let task_rows: Vec<Vec<f32>> = (0..300).map(|_| angle(&mut rng, 0.0, 2.0)).collect();
    let task = EmbeddingMatrix::with_uids(&task_rows, (0..300).map(|i| Uid(i + 1)).collect(), 2)?;
    let importance = cluster_importance(&model, &[task], 0.72)?;
    for (c, w) in importance.weights.iter().enumerate() {
        println!("cluster {c:>2} weight {w:.3}");
    }

    let selected = cids_select(&records, &labels, &importance, 400, ScoreColumn::FlippedClip)?;
    let chosen: Vec<usize> = records
        .iter()
        .zip(&labels)
        .filter(|(r, _)| selected.contains(&r.uid))
        .map(|(_, &l)| l)
        .collect();
    let h = cluster_size_histogram(&chosen);
    println!("selected {} from {} clusters (min {}, median {}, max {})", selected.unique_count(), h.counts.len(), h.min, h.median, h.max);
    Ok(())
}
