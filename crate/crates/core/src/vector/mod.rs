//! Vector math shared by every stage: normalization, cosine similarity,
//! Lloyd k-means and product quantization.

mod kmeans;
pub(crate) mod pq;

pub use kmeans::{kmeans_assign, kmeans_fit, nearest_centroid, ClusterModel};
pub use pq::{adc_distance, pq_decode, pq_encode, pq_train, AdcTable, PqCodebook};

use crate::error::{Error, Result};

/// Squared Euclidean distance.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Rows normalized to unit length, kept in `f64` for threshold comparisons.
pub(crate) fn unit_rows<'a>(rows: impl Iterator<Item = &'a [f32]>) -> Result<Vec<Vec<f64>>> {
    rows.map(|r| {
        let n = norm(r);
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(r.iter().map(|&x| x as f64 / n).collect())
    })
    .collect()
}

#[inline]
pub(crate) fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
