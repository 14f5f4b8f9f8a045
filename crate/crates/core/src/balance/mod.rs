//! Semantic balance: chunked exact top-k neighbors, union-find grouping
//! under a strict distance threshold, and one representative per group.
//!
//! ```
//! use embalance::balance::balance;
//! use embalance::EmbeddingSet;
//!
//! let set = EmbeddingSet::from_rows(&[
//!     [1.0f32, 0.0],
//!     [1.0, 0.0],
//!     [0.0, 1.0],
//! ])?;
//! let result = balance(&set, 0.07, 8, 2)?;
//! assert_eq!(result.kept, vec![0, 2]);
//! # Ok::<(), embalance::Error>(())
//! ```

mod topk;
mod union_find;

use std::collections::{BTreeMap, VecDeque};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{sq_distance, sq_norms, within};
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};

pub use topk::{chunk_topk, merge_topk, ChunkTopK, NeighborTable, NO_NEIGHBOR};
pub use union_find::Partition;

pub const DEFAULT_BETA: f64 = 0.07;
pub const DEFAULT_TOPK: usize = 64;

/// Outcome of a balance run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceResult {
    pub n: usize,
    /// Ascending retained indices, one per set.
    pub kept: Vec<usize>,
    /// `(n - kept) / n`, or 0 for an empty input.
    pub removed_fraction: f64,
    /// Set size -> number of sets.
    pub set_sizes: BTreeMap<usize, usize>,
    pub beta: f64,
    pub k: usize,
}

/// Representatives chosen for a partition, before run parameters are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub n: usize,
    pub kept: Vec<usize>,
    pub removed_fraction: f64,
    pub set_sizes: BTreeMap<usize, usize>,
}

impl Selection {
    pub fn into_result(self, beta: f64, k: usize) -> BalanceResult {
        BalanceResult {
            n: self.n,
            kept: self.kept,
            removed_fraction: self.removed_fraction,
            set_sizes: self.set_sizes,
            beta,
            k,
        }
    }
}

fn check_beta(beta: f64) -> Result<f64> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "beta must be positive and finite, got {beta}"
        )));
    }
    Ok(beta * beta)
}

/// Unions every retained neighbor pair closer than `beta`.
pub fn build_sets(table: &NeighborTable, beta: f64) -> Result<Partition> {
    let beta_sq = check_beta(beta)?;
    let mut partition = Partition::new(table.len());
    for (q, j, d) in table.entries() {
        if within(d, beta_sq) {
            partition.union(q, j);
        }
    }
    Ok(partition)
}

/// Keeps, per set, the member nearest the arithmetic mean of the set
/// (lowest index on ties).
pub fn select_representatives(partition: &Partition, set: &EmbeddingSet) -> Result<Selection> {
    let n = set.len();
    if partition.len() != n {
        return Err(Error::Shape(format!(
            "partition over {} items, set has {n}",
            partition.len()
        )));
    }
    let dim = set.dim();
    let roots = partition.roots();

    // dense slot per root
    let mut slot_of_root = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    for &r in &roots {
        if slot_of_root[r] == usize::MAX {
            slot_of_root[r] = sizes.len();
            sizes.push(0usize);
        }
        sizes[slot_of_root[r]] += 1;
    }

    let mut centroids = vec![0f64; sizes.len() * dim];
    for (i, row) in set.rows().enumerate() {
        let s = slot_of_root[roots[i]];
        if sizes[s] > 1 {
            for (c, &v) in centroids[s * dim..(s + 1) * dim].iter_mut().zip(row) {
                *c += v as f64;
            }
        }
    }
    for (s, c) in centroids.chunks_exact_mut(dim).enumerate() {
        let count = sizes[s] as f64;
        c.iter_mut().for_each(|v| *v /= count);
    }

    let mut best: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); sizes.len()];
    for (i, row) in set.rows().enumerate() {
        let s = slot_of_root[roots[i]];
        let d = if sizes[s] == 1 {
            0.0
        } else {
            centroids[s * dim..(s + 1) * dim]
                .iter()
                .zip(row)
                .map(|(&c, &v)| (v as f64 - c).powi(2))
                .sum()
        };
        if d < best[s].0 {
            best[s] = (d, i);
        }
    }

    let mut kept: Vec<usize> = best.into_iter().map(|(_, i)| i).collect();
    kept.sort_unstable();
    let removed_fraction = if n == 0 {
        0.0
    } else {
        (n - kept.len()) as f64 / n as f64
    };
    Ok(Selection {
        n,
        kept,
        removed_fraction,
        set_sizes: partition.size_histogram(),
    })
}

/// `chunks` contiguous, nearly equal ranges covering `0..n` (empty ranges dropped).
pub fn chunk_ranges(n: usize, chunks: usize) -> Vec<Range<usize>> {
    let chunks = chunks.max(1);
    (0..chunks)
        .map(|c| (c * n / chunks)..((c + 1) * n / chunks))
        .filter(|r| !r.is_empty())
        .collect()
}

/// Global neighbor table computed chunk by chunk. Partials of one query
/// chunk are merged as soon as they complete, so peak memory is one
/// query chunk's worth of partials.
pub fn neighbor_table(set: &EmbeddingSet, k: usize, chunks: usize) -> Result<NeighborTable> {
    if chunks == 0 {
        return Err(Error::InvalidParameter("chunks must be at least 1".into()));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let norms = sq_norms(set.as_slice(), set.dim());
    let ranges = chunk_ranges(set.len(), chunks);

    let blocks: Vec<NeighborTable> = ranges
        .par_iter()
        .map(|q| {
            let partials: Vec<ChunkTopK> = ranges
                .par_iter()
                .map(|r| topk::chunk_topk_with_norms(set, &norms, q.clone(), r.clone(), k))
                .collect::<Result<_>>()?;
            topk::merge_query_block(&partials, q.clone(), set.len(), k)
        })
        .collect::<Result<_>>()?;
    Ok(NeighborTable::concat(k, blocks))
}

/// Full pipeline: chunked top-k, merge, union-find at `beta`, representatives.
pub fn balance(set: &EmbeddingSet, beta: f64, k: usize, chunks: usize) -> Result<BalanceResult> {
    check_beta(beta)?;
    let table = neighbor_table(set, k, chunks)?;
    let partition = build_sets(&table, beta)?;
    Ok(select_representatives(&partition, set)?.into_result(beta, k))
}

/// Connected components of the complete `beta` threshold graph, found by
/// breadth-first search over all pairs.
pub fn brute_force_partition(set: &EmbeddingSet, beta: f64) -> Result<Partition> {
    let beta_sq = check_beta(beta)?;
    let n = set.len();
    let mut component = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        component[start] = start;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if component[v] == usize::MAX && within(sq_distance(set.row(u), set.row(v)), beta_sq)
                {
                    component[v] = start;
                    queue.push_back(v);
                }
            }
        }
    }
    Ok(Partition::from_labels(&component))
}

/// Reference answer for the unbounded-k pipeline.
pub fn brute_force_balance(set: &EmbeddingSet, beta: f64) -> Result<BalanceResult> {
    let partition = brute_force_partition(set, beta)?;
    Ok(select_representatives(&partition, set)?.into_result(beta, set.len().saturating_sub(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize(&EmbeddingSet::new(d, data).unwrap()).unwrap()
    }

    #[test]
    fn no_merges_above_threshold() {
        let s = EmbeddingSet::from_rows(&[[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
            .unwrap();
        let t = neighbor_table(&s, 2, 1).unwrap();
        let p = build_sets(&t, 1.0).unwrap();
        assert_eq!(p.set_count(), 3);
    }

    #[test]
    fn zero_distance_triplet_collapses() {
        let s = EmbeddingSet::from_rows(&[[0.6f32, 0.8], [0.6, 0.8], [0.6, 0.8], [0.8, -0.6]])
            .unwrap();
        let t = neighbor_table(&s, 3, 2).unwrap();
        let p = build_sets(&t, 0.07).unwrap();
        assert_eq!(p.sets(), vec![vec![0, 1, 2], vec![3]]);
    }

    #[test]
    fn full_k_matches_connected_components() {
        for seed in 0..5 {
            let s = random_unit_set(60, 3, seed);
            let t = neighbor_table(&s, 59, 3).unwrap();
            assert_eq!(
                build_sets(&t, 0.4).unwrap(),
                brute_force_partition(&s, 0.4).unwrap()
            );
        }
    }

    #[test]
    fn singleton_is_kept() {
        let s = EmbeddingSet::from_rows(&[[1.0f32, 0.0]]).unwrap();
        let sel = select_representatives(&Partition::new(1), &s).unwrap();
        assert_eq!(sel.kept, vec![0]);
        assert_eq!(sel.removed_fraction, 0.0);
    }

    #[test]
    fn duplicated_member_wins_with_lowest_index() {
        // {u, u, v}: centroid (2u + v)/3 is closer to u; indices 0 and 2 tie.
        let u = [1.0f32, 0.0];
        let v = [0.0f32, 1.0];
        let s = EmbeddingSet::from_rows(&[v, u, u]).unwrap();
        let sel = select_representatives(&Partition::from_labels(&[0, 0, 0]), &s).unwrap();
        // |u - c|^2 = (1/3)^2 + (1/3)^2 = 2/9, |v - c|^2 = (2/3)^2 + (2/3)^2 = 8/9
        assert_eq!(sel.kept, vec![1]);
    }

    #[test]
    fn kept_count_matches_set_count() {
        let p = Partition::from_labels(&[0, 1, 0, 2, 1, 1, 3]);
        let s = random_unit_set(7, 4, 2);
        let sel = select_representatives(&p, &s).unwrap();
        assert_eq!(sel.kept.len(), 4);
        assert_eq!(sel.removed_fraction, 3.0 / 7.0);
        assert!((sel.removed_fraction - (1.0 - 4.0 / 7.0)).abs() < 1e-15);
    }

    #[test]
    fn total_collapse_and_all_distinct() {
        let s = EmbeddingSet::from_rows(&vec![[0.6f32, 0.8]; 9]).unwrap();
        assert_eq!(balance(&s, 1e-3, 4, 3).unwrap().kept, vec![0]);

        let basis: Vec<Vec<f32>> = (0..6)
            .map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let s = EmbeddingSet::from_rows(&basis).unwrap();
        assert_eq!(balance(&s, 0.07, 64, 2).unwrap().kept, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn threshold_is_strict() {
        let s = EmbeddingSet::from_rows(&[[0.0f32, 0.0], [0.5, 0.0]]).unwrap();
        assert_eq!(brute_force_balance(&s, 0.5).unwrap().kept, vec![0, 1]);
        assert_eq!(balance(&s, 0.5, 1, 1).unwrap().kept, vec![0, 1]);
        assert_eq!(brute_force_balance(&s, 0.5000001).unwrap().kept, vec![0]);
    }

    #[test]
    fn chain_is_transitive() {
        let s = EmbeddingSet::from_rows(&[[0.0f32], [0.6], [1.2], [5.0]]).unwrap();
        let r = brute_force_balance(&s, 0.7).unwrap();
        assert_eq!(r.set_sizes, BTreeMap::from([(1, 1), (3, 1)]));
        assert_eq!(r.kept, vec![1, 3]);
    }

    #[test]
    fn rejects_bad_parameters() {
        let s = random_unit_set(4, 2, 0);
        assert!(balance(&s, 0.0, 4, 1).is_err());
        assert!(balance(&s, f64::NAN, 4, 1).is_err());
        assert!(balance(&s, 0.1, 0, 1).is_err());
        assert!(balance(&s, 0.1, 4, 0).is_err());
    }

    #[test]
    fn empty_set() {
        let s = EmbeddingSet::new(4, vec![]).unwrap();
        let r = balance(&s, 0.07, 4, 2).unwrap();
        assert!(r.kept.is_empty());
        assert_eq!(r.removed_fraction, 0.0);
    }

    #[test]
    fn euclidean_agrees_with_cosine_on_unit_rows() {
        let s = random_unit_set(40, 8, 11);
        let t = neighbor_table(&s, 10, 2).unwrap();
        for q in 0..s.len() {
            for (&j, &d2) in t.indices_row(q).iter().zip(t.sq_distances_row(q)) {
                let cos: f64 = s
                    .row(q)
                    .iter()
                    .zip(s.row(j as usize))
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                assert!((d2 as f64 - (2.0 - 2.0 * cos)).abs() < 1e-5);
            }
        }
    }
}
