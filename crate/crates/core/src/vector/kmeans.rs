use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::squared_l2;
use crate::corpus::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Fitted k-means centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    /// Sum of squared distances of the training points to their nearest centroid.
    pub inertia: f64,
    /// Inertia after every accepted Lloyd step, ending with the final value.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    /// A model from explicit centroids (no training statistics).
    pub fn from_centroids(dim: usize, centroids: Vec<f32>) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} centroid values do not form rows of dim {dim}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite centroid".into()));
        }
        Ok(ClusterModel {
            k: centroids.len() / dim,
            dim,
            centroids,
            inertia: 0.0,
            inertia_history: Vec::new(),
            iterations: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Nearest centroid of `v` (ties go to the lowest index) and its squared distance.
    pub fn nearest(&self, v: &[f32]) -> (usize, f32) {
        nearest_centroid(&self.centroids, self.dim, v)
    }

    pub fn assign(&self, x: &EmbeddingMatrix) -> Result<Vec<usize>> {
        if x.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: x.dim(),
            });
        }
        Ok(assign_all(x.as_slice(), self.dim, &self.centroids).0)
    }
}

pub fn nearest_centroid(centroids: &[f32], dim: usize, v: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn kmeans_fit(x: &EmbeddingMatrix, k: usize, max_iters: usize, seed: u64) -> Result<ClusterModel> {
    fit_flat(x.as_slice(), x.dim(), k, max_iters, seed)
}

pub fn kmeans_assign(model: &ClusterModel, x: &EmbeddingMatrix) -> Result<Vec<usize>> {
    model.assign(x)
}

fn assign_all(data: &[f32], dim: usize, centroids: &[f32]) -> (Vec<usize>, Vec<f32>) {
    data.par_chunks_exact(dim)
        .map(|p| nearest_centroid(centroids, dim, p))
        .unzip()
}

/// Lloyd iterations from a k-means++ start. Each accepted step must not
/// increase inertia; a step that would (float rounding near convergence)
/// ends the fit with the previous centroids.
pub(crate) fn fit_flat(data: &[f32], dim: usize, k: usize, max_iters: usize, seed: u64) -> Result<ClusterModel> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dim must be positive".into()));
    }
    let n = data.len() / dim;
    if n == 0 {
        return Err(Error::InvalidArgument("cannot cluster an empty matrix".into()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={n} (number of points)")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, dim, k, &mut rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters {
        let (mut next_labels, mut dists) = assign_all(data, dim, &centroids);
        repair_empty(k, &mut next_labels, &mut dists);
        if next_labels == labels {
            break;
        }
        let next = update_centroids(data, dim, k, &next_labels);
        let inertia = labelled_inertia(data, dim, &next, &next_labels);
        if history.last().is_some_and(|&prev| inertia > prev) {
            break;
        }
        centroids = next;
        labels = next_labels;
        history.push(inertia);
        iterations += 1;
    }

    // Nearest-centroid inertia of the final model; never above the last step's.
    let (_, dists) = assign_all(data, dim, &centroids);
    let inertia: f64 = dists.iter().map(|&d| d as f64).sum();
    if history.last() != Some(&inertia) {
        history.push(inertia);
    }

    Ok(ClusterModel {
        k,
        dim,
        centroids,
        inertia,
        inertia_history: history,
        iterations,
    })
}

fn plus_plus_init(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut d2: Vec<f32> = data.par_chunks_exact(dim).map(|p| squared_l2(p, point(first))).collect();

    for _ in 1..k {
        let total: f64 = d2.iter().map(|&d| d as f64).sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d as f64;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            rng.gen_range(0..n)
        };
        let c = point(pick).to_vec();
        d2.par_iter_mut()
            .zip(data.par_chunks_exact(dim))
            .for_each(|(d, p)| *d = d.min(squared_l2(p, &c)));
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Gives every empty cluster the point farthest from its centroid, taken from
/// a cluster that keeps at least one member.
fn repair_empty(k: usize, labels: &mut [usize], dists: &mut [f32]) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f32)> = None;
        for (p, &d) in dists.iter().enumerate() {
            if counts[labels[p]] > 1 && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((p, d));
            }
        }
        // k <= n guarantees a donor while some cluster is empty.
        let (p, _) = best.expect("a cluster with two or more members exists");
        counts[labels[p]] -= 1;
        labels[p] = j;
        counts[j] = 1;
        dists[p] = 0.0;
    }
}

fn update_centroids(data: &[f32], dim: usize, k: usize, labels: &[usize]) -> Vec<f32> {
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &l) in data.chunks_exact(dim).zip(labels) {
        counts[l] += 1;
        for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p) {
            *s += v as f64;
        }
    }
    sums.chunks_exact(dim)
        .zip(&counts)
        .flat_map(|(s, &c)| s.iter().map(move |&v| (v / c as f64) as f32))
        .collect()
}

fn labelled_inertia(data: &[f32], dim: usize, centroids: &[f32], labels: &[usize]) -> f64 {
    data.chunks_exact(dim)
        .zip(labels)
        .map(|(p, &l)| squared_l2(p, &centroids[l * dim..(l + 1) * dim]) as f64)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn matrix(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    fn brute_force_labels(model: &ClusterModel, x: &EmbeddingMatrix) -> Vec<usize> {
        x.rows()
            .map(|p| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for c in 0..model.k() {
                    let d: f64 = p
                        .iter()
                        .zip(model.centroid(c))
                        .map(|(&a, &b)| ((a - b) as f64).powi(2))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn two_separated_pairs() {
        let x = matrix(&[vec![0.0, 0.0], vec![0.0, 2.0], vec![10.0, 10.0], vec![12.0, 10.0]]);
        let m = kmeans_fit(&x, 2, 50, 3).unwrap();
        let mut cs: Vec<Vec<f32>> = (0..2).map(|i| m.centroid(i).to_vec()).collect();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cs, vec![vec![0.0, 1.0], vec![11.0, 10.0]]);
        // Each pair contributes 2 * 1^2.
        assert_eq!(m.inertia, 4.0);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let rows = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![4.0, 4.0], vec![0.0, -7.0]];
        let m = kmeans_fit(&matrix(&rows), 4, 20, 11).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut cs: Vec<Vec<f32>> = (0..4).map(|i| m.centroid(i).to_vec()).collect();
        let mut expect = rows.clone();
        cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cs, expect);
    }

    #[test]
    fn k_one_is_mean() {
        let m = kmeans_fit(&matrix(&[vec![1.0, 0.0], vec![3.0, 4.0], vec![5.0, 2.0]]), 1, 10, 0).unwrap();
        assert_eq!(m.centroid(0), &[3.0, 2.0]);
    }

    #[test]
    fn duplicate_points_with_k_equal_n() {
        let m = kmeans_fit(&matrix(&[vec![1.0], vec![1.0], vec![1.0]]), 3, 10, 0).unwrap();
        assert_eq!(m.k(), 3);
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn errors() {
        let x = matrix(&[vec![1.0, 2.0]]);
        assert!(kmeans_fit(&x, 2, 10, 0).is_err());
        assert!(kmeans_fit(&x, 0, 10, 0).is_err());
        let empty = EmbeddingMatrix::new(2, vec![], vec![]).unwrap();
        assert!(kmeans_fit(&empty, 1, 10, 0).is_err());
        let m = kmeans_fit(&x, 1, 10, 0).unwrap();
        assert!(m.assign(&matrix(&[vec![1.0, 2.0, 3.0]])).is_err());
    }

    #[test]
    fn assign_exact_and_ties() {
        let m = ClusterModel::from_centroids(2, vec![9.0, 9.0, 0.0, 1.0, 0.0, -1.0, 5.0, 5.0]).unwrap();
        let x = matrix(&[vec![5.0, 5.0], vec![0.0, 0.0]]);
        assert_eq!(m.assign(&x).unwrap(), vec![3, 1]);
    }

    #[test]
    fn assign_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rows: Vec<Vec<f32>> = (0..20).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let x = matrix(&rows);
        let m = kmeans_fit(&x, 5, 30, 7).unwrap();
        assert_eq!(m.assign(&x).unwrap(), brute_force_labels(&m, &x));
    }

    #[test]
    fn deterministic_per_seed_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f32>> = (0..300).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let x = matrix(&rows);
        let a = kmeans_fit(&x, 12, 100, 9).unwrap();
        let b = kmeans_fit(&x, 12, 100, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.inertia_history.windows(2).all(|w| w[1] <= w[0]), "{:?}", a.inertia_history);
        assert_eq!(*a.inertia_history.last().unwrap(), a.inertia);
    }
}
