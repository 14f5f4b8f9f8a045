//! Spherical k-means over unit-norm embeddings.
//!
//! The objective is the mean squared residual
//! `(1/N) * sum_i ||e_i - w_{z_i}||^2` where `z_i` is a single cluster index.
//! The E-step assigns each row to its nearest centroid (ties to the lowest
//! index); the M-step takes the mean of each cluster and projects it back
//! onto the unit sphere. For unit-norm rows that projection is the exact
//! constrained minimizer, so the objective never increases.

mod file;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};

pub use file::{read_model, write_model, ModelFile, KMC_MAGIC, KMC_VERSION, PROVENANCE_KMEANS};

pub const DEFAULT_K: usize = 1024;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Centroid matrix `W` (d x k). Column `j` is stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    dim: usize,
    data: Vec<f32>,
}

impl Centroids {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} centroid values do not form columns of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    /// Centroids copied from the given rows of `set`.
    pub fn from_rows(set: &EmbeddingSet, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * set.dim());
        for &i in rows {
            data.extend_from_slice(set.row(i));
        }
        Self {
            dim: set.dim(),
            data,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn column(&self, j: usize) -> &[f32] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn columns(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// One alternation of the solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    /// Objective after this iteration's assignment.
    pub objective: f64,
    /// Clusters that were empty and got re-seeded in this iteration's update.
    pub reseeded: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Centroids,
    pub labels: Vec<usize>,
    pub objective: f64,
    pub iterations_run: usize,
    pub converged: bool,
    /// Objective of the initial assignment, before any update.
    pub initial_objective: f64,
    pub trace: Vec<IterationTrace>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.k()
    }

    /// Members per cluster, indexed by cluster.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        cluster_sizes(&self.labels, self.k())
    }

    /// Cluster size -> number of clusters of that size.
    pub fn size_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for s in self.cluster_sizes() {
            *hist.entry(s).or_insert(0) += 1;
        }
        hist
    }
}

pub fn cluster_sizes(labels: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &l in labels {
        sizes[l] += 1;
    }
    sizes
}

/// Squared residual accumulated in f64.
#[inline]
pub fn sq_residual(row: &[f32], centroid: &[f32]) -> f64 {
    let mut acc = [0f64; 4];
    let body = row.len() / 4 * 4;
    for (a, b) in row[..body].chunks_exact(4).zip(centroid[..body].chunks_exact(4)) {
        for l in 0..4 {
            let d = a[l] as f64 - b[l] as f64;
            acc[l] += d * d;
        }
    }
    let mut tail = 0f64;
    for (&a, &b) in row[body..].iter().zip(&centroid[body..]) {
        let d = a as f64 - b as f64;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_k(set: &EmbeddingSet, k: usize) -> Result<()> {
    if k == 0 || k > set.len() {
        return Err(Error::InvalidParameter(format!(
            "k must satisfy 1 <= k <= N, got k = {k}, N = {}",
            set.len()
        )));
    }
    Ok(())
}

/// k-means++ seeding: first centroid uniform, then each next one drawn with
/// probability proportional to the squared distance to the nearest chosen.
/// When every remaining weight is zero the draw is uniform over unchosen rows.
pub fn kmeans_init(set: &EmbeddingSet, k: usize, seed: u64) -> Result<Centroids> {
    check_k(set, k)?;
    let n = set.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];

    let first = rng.gen_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut nearest: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_residual(set.row(i), set.row(first)))
        .collect();

    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut cum = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    cum += w;
                    pick = Some(i);
                    if cum > target {
                        break;
                    }
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        let c = set.row(next);
        nearest.par_iter_mut().enumerate().for_each(|(i, w)| {
            let d = sq_residual(set.row(i), c);
            if d < *w {
                *w = d;
            }
        });
    }
    Ok(Centroids::from_rows(set, &chosen))
}

fn check_dims(set: &EmbeddingSet, centroids: &Centroids) -> Result<()> {
    if set.dim() != centroids.dim() {
        return Err(Error::Shape(format!(
            "centroid dim {} does not match embedding dim {}",
            centroids.dim(),
            set.dim()
        )));
    }
    if centroids.k() == 0 {
        return Err(Error::Shape("no centroids".into()));
    }
    Ok(())
}

fn nearest(row: &[f32], centroids: &Centroids) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, w) in centroids.columns().enumerate() {
        let d = sq_residual(row, w);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_with_residuals(set: &EmbeddingSet, centroids: &Centroids) -> (Vec<usize>, Vec<f64>) {
    (0..set.len())
        .into_par_iter()
        .map(|i| nearest(set.row(i), centroids))
        .unzip()
}

fn mean_objective(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    residuals.iter().sum::<f64>() / residuals.len() as f64
}

/// Nearest-centroid labels (ties to the lowest index) and the mean squared
/// residual.
pub fn assign(set: &EmbeddingSet, centroids: &Centroids) -> Result<(Vec<usize>, f64)> {
    check_dims(set, centroids)?;
    let (labels, residuals) = assign_with_residuals(set, centroids);
    Ok((labels, mean_objective(&residuals)))
}

/// The objective for fixed labels.
pub fn objective(set: &EmbeddingSet, centroids: &Centroids, labels: &[usize]) -> Result<f64> {
    check_dims(set, centroids)?;
    check_labels(labels, set.len(), centroids.k())?;
    let residuals: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_residual(set.row(i), centroids.column(l)))
        .collect();
    Ok(mean_objective(&residuals))
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidParameter(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

/// M-step. Each non-empty cluster moves to the unit-normalized mean of its
/// members. Empty clusters are re-seeded, in index order, to the rows with
/// the largest residual against the updated centroids (ties to the lowest
/// row), each row used at most once. Returns the re-seeded clusters too.
pub fn update_centroids_traced(
    set: &EmbeddingSet,
    labels: &[usize],
    k: usize,
) -> Result<(Centroids, Vec<usize>)> {
    check_labels(labels, set.len(), k)?;
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let dim = set.dim();
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    let mut first_member = vec![usize::MAX; k];
    for (i, row) in set.rows().enumerate() {
        let l = labels[i];
        counts[l] += 1;
        first_member[l] = first_member[l].min(i);
        for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(row) {
            *s += v as f64;
        }
    }

    let mut data = vec![0f32; k * dim];
    let mut empty = Vec::new();
    for j in 0..k {
        let out = &mut data[j * dim..(j + 1) * dim];
        if counts[j] == 0 {
            empty.push(j);
            continue;
        }
        let mean = &sums[j * dim..(j + 1) * dim];
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (o, &m) in out.iter_mut().zip(mean) {
                *o = (m / norm) as f32;
            }
        } else {
            // members cancel out; every unit vector is equally good
            out.copy_from_slice(set.row(first_member[j]));
        }
    }

    if !empty.is_empty() {
        let mut residuals: Vec<(f64, usize)> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (sq_residual(set.row(i), &data[l * dim..(l + 1) * dim]), i))
            .collect();
        residuals.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (&j, &(_, i)) in empty.iter().zip(&residuals) {
            data[j * dim..(j + 1) * dim].copy_from_slice(set.row(i));
        }
    }
    Ok((Centroids { dim, data }, empty))
}

pub fn update_centroids(set: &EmbeddingSet, labels: &[usize], k: usize) -> Result<Centroids> {
    update_centroids_traced(set, labels, k).map(|(c, _)| c)
}

/// Lloyd iterations from the given starting centroids until the absolute
/// objective change drops below `tol` or `max_iters` updates have run.
pub fn kmeans_from(
    set: &EmbeddingSet,
    init: Centroids,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterModel> {
    check_dims(set, &init)?;
    if max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
    }
    if !(tol >= 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be non-negative, got {tol}")));
    }
    let k = init.k();
    let mut centroids = init;
    let (mut labels, residuals) = assign_with_residuals(set, &centroids);
    let mut objective = mean_objective(&residuals);
    let initial_objective = objective;
    let mut trace = Vec::new();
    let mut converged = false;

    for _ in 0..max_iters {
        let (next, reseeded) = update_centroids_traced(set, &labels, k)?;
        let (next_labels, residuals) = assign_with_residuals(set, &next);
        let next_objective = mean_objective(&residuals);
        trace.push(IterationTrace {
            objective: next_objective,
            reseeded,
        });
        let change = (objective - next_objective).abs();
        centroids = next;
        labels = next_labels;
        objective = next_objective;
        if change < tol {
            converged = true;
            break;
        }
    }

    Ok(ClusterModel {
        centroids,
        labels,
        objective,
        iterations_run: trace.len(),
        converged,
        initial_objective,
        trace,
    })
}

/// k-means++ seeding followed by [`kmeans_from`].
pub fn kmeans(
    set: &EmbeddingSet,
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<ClusterModel> {
    let init = kmeans_init(set, k, seed)?;
    kmeans_from(set, init, max_iters, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::normalize;
    use rand_distr::{Distribution, Normal};

    fn random_unit_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let data: Vec<f32> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
        normalize(&EmbeddingSet::new(d, data).unwrap()).unwrap()
    }

    #[test]
    fn init_saturates_at_k_equals_n() {
        let s = random_unit_set(12, 4, 1);
        let c = kmeans_init(&s, 12, 3).unwrap();
        let (_, obj) = assign(&s, &c).unwrap();
        assert_eq!(obj, 0.0);
    }

    #[test]
    fn init_single_centroid_is_a_row() {
        let s = random_unit_set(12, 4, 1);
        let c = kmeans_init(&s, 1, 9).unwrap();
        assert!(s.rows().any(|r| r == c.column(0)));
        assert_eq!(c, kmeans_init(&s, 1, 9).unwrap());
        assert!(kmeans_init(&s, 13, 9).is_err());
        assert!(kmeans_init(&s, 0, 9).is_err());
    }

    #[test]
    fn init_handles_all_duplicates() {
        let s = EmbeddingSet::from_rows(&vec![[1.0f32, 0.0]; 5]).unwrap();
        let c = kmeans_init(&s, 5, 0).unwrap();
        assert_eq!(c.k(), 5);
    }

    #[test]
    fn assign_examples() {
        let s = EmbeddingSet::from_rows(&[[0.0f32, 1.0]]).unwrap();
        let c = Centroids::new(
            2,
            vec![1.0, 0.0, -1.0, 0.0, 0.6, 0.8, 0.0, 1.0],
        )
        .unwrap();
        let (labels, obj) = assign(&s, &c).unwrap();
        assert_eq!((labels[0], obj), (3, 0.0));

        // (0,1) is equidistant from (1,0) and (-1,0)
        let c = Centroids::new(2, vec![0.6, -0.8, 1.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(assign(&s, &c).unwrap().0, vec![1]);

        let wrong = Centroids::new(3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(assign(&s, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn update_examples() {
        let s = EmbeddingSet::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
        let c = update_centroids(&s, &[0, 0], 1).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((c.column(0)[0] - h).abs() < 1e-6 && (c.column(0)[1] - h).abs() < 1e-6);

        // cluster 1 empty: re-seeded to the row farthest from centroid 0
        let s = EmbeddingSet::from_rows(&[[1.0f32, 0.0], [0.8, 0.6], [0.0, 1.0]]).unwrap();
        let (c, reseeded) = update_centroids_traced(&s, &[0, 0, 0], 2).unwrap();
        assert_eq!(reseeded, vec![1]);
        let residuals: Vec<f64> = s.rows().map(|r| sq_residual(r, c.column(0))).collect();
        let far = (0..3).max_by(|&a, &b| residuals[a].total_cmp(&residuals[b])).unwrap();
        assert_eq!(c.column(1), s.row(far));
    }

    #[test]
    fn converged_model_is_a_fixed_point() {
        let s = random_unit_set(40, 3, 5);
        let m = kmeans(&s, 3, 200, 1e-12, 1).unwrap();
        assert!(m.converged);
        let again = update_centroids(&s, &m.labels, 3).unwrap();
        for (a, b) in again.as_slice().iter().zip(m.centroids.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn columns_are_unit_norm() {
        let s = random_unit_set(100, 5, 2);
        let m = kmeans(&s, 6, 50, 1e-9, 4).unwrap();
        for w in m.centroids.columns() {
            let n: f64 = w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn k_equals_n_has_zero_objective() {
        let s = random_unit_set(15, 4, 8);
        let m = kmeans(&s, 15, 10, 1e-6, 0).unwrap();
        assert!(m.objective < 1e-12);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = random_unit_set(200, 6, 3);
        assert_eq!(kmeans(&s, 8, 30, 1e-6, 17).unwrap(), kmeans(&s, 8, 30, 1e-6, 17).unwrap());
    }

    #[test]
    fn rejects_bad_parameters() {
        let s = random_unit_set(5, 2, 3);
        assert!(kmeans(&s, 2, 0, 1e-6, 0).is_err());
        assert!(kmeans(&s, 6, 10, 1e-6, 0).is_err());
        assert!(update_centroids(&s, &[0, 1, 2, 3, 4], 3).is_err());
    }

    #[test]
    fn permuting_rows_permutes_labels() {
        let s = random_unit_set(120, 4, 21);
        let init = Centroids::from_rows(&s, &[3, 50, 99]);
        let m = kmeans_from(&s, init.clone(), 50, 1e-9).unwrap();

        let perm: Vec<usize> = (0..120).map(|i| (i * 7 + 3) % 120).collect();
        let p = s.subset(&perm).unwrap();
        let mp = kmeans_from(&p, init, 50, 1e-9).unwrap();
        for (pos, &orig) in perm.iter().enumerate() {
            assert_eq!(mp.labels[pos], m.labels[orig]);
        }
    }
}
