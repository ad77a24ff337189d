//! k-means++ followed by Lloyd iterations, with more clusters than blobs.
//!
//! cargo run --example kmeans

use itcurate::corpus::EmbeddingMatrix;
use itcurate::vector::kmeans_fit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> itcurate::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let centers = [[4.0f32, 0.0], [-4.0, 0.0], [0.0, 5.0]];
    let rows: Vec<Vec<f32>> = (0..600)
        .map(|i| {
            let c = centers[i % 3];
            vec![c[0] + rng.gen_range(-2.0..2.0), c[1] + rng.gen_range(-2.0..2.0)]
        })
        .collect();
    let x = EmbeddingMatrix::from_rows(&rows)?;

    let model = kmeans_fit(&x, 7, 25, 7)?;
    println!("{} iterations", model.iterations);
    for (i, inertia) in model.inertia_history.iter().enumerate() {
        println!("  iter {i:>2}: inertia {inertia:.3}");
    }
    let labels = model.assign(&x)?;
    for c in 0..model.k() {
        let n = labels.iter().filter(|&&l| l == c).count();
        println!("cluster {c}: {n} points around {:?}", model.centroid(c));
    }
    Ok(())
}
