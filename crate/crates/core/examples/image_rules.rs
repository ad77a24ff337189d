//! Aspect-ratio bounds and the face-area limit, boundaries included.
//!
//! cargo run --example image_rules

use itcurate::corpus::{SampleRecord, Uid};
use itcurate::unimodal::{apply_image_rules, ImageRuleConfig};

fn main() {
    let cfg = ImageRuleConfig::default();
    let cases = [(640, 480, 0.1), (33, 100, 0.0), (32, 100, 0.0), (333, 100, 0.0), (1000, 200, 0.0), (500, 500, 0.4), (500, 500, 0.41)];
    for (i, (w, h, face)) in cases.into_iter().enumerate() {
        let mut r = SampleRecord::new(Uid(i as u128 + 1), "t", w, h);
        r.face_area_ratio = Some(face);
        println!(
            "{w:>5}x{h:<4} aspect {:>5.2} face {face:.2}: {:?}",
            w as f64 / h as f64,
            apply_image_rules(&r, &cfg)
        );
    }
}
