//! Trains a product quantizer and compares ADC distances with exact ones.
//!
//! cargo run --example product_quantization

use itcurate::corpus::EmbeddingMatrix;
use itcurate::vector::{pq_train, squared_l2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> itcurate::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<f32>> = (0..4000).map(|_| (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let x = EmbeddingMatrix::from_rows(&rows)?;

    let pq = pq_train(&x, 4, 8, 0)?;
    println!("m = {}, nbits = {}, sub_dim = {}", pq.m(), pq.nbits(), pq.sub_dim());

    let query = &rows[0];
    let table = pq.adc_table(query)?;
    let mut err = 0.0f64;
    for r in &rows[1..200] {
        let codes = pq.encode(r)?;
        let adc = table.distance(&codes) as f64;
        let exact = (squared_l2(query, r) as f64).sqrt();
        err += (adc - exact).abs() / exact;
    }
    println!("mean relative error of ADC vs exact distance: {:.3}", err / 199.0);

    let codes = pq.encode(query)?;
    let back = pq.decode(&codes)?;
    println!("codes {codes:?}, reconstruction error {:.3}", (squared_l2(query, &back) as f64).sqrt());
    Ok(())
}
