//! Per-chunk top-k neighbor tables and their global merge.

use std::ops::Range;

use rayon::prelude::*;

use crate::distance::{combine, dot4_block, sq_norms};
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};

/// Index stored in padding slots when fewer than `k` candidates exist.
pub const NO_NEIGHBOR: i64 = -1;

/// Top-k candidates of the queries in `query_range` among the items of
/// `ref_range`. Rows are ascending by `(squared distance, index)`; padding
/// slots hold `+inf` and [`NO_NEIGHBOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkTopK {
    pub query_range: Range<usize>,
    pub ref_range: Range<usize>,
    pub k: usize,
    sq_distances: Vec<f32>,
    indices: Vec<i64>,
}

/// The merged `N x k` table.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    k: usize,
    sq_distances: Vec<f32>,
    indices: Vec<i64>,
}

macro_rules! row_accessors {
    () => {
        /// Squared Euclidean distances of a local row.
        pub fn sq_distances_row(&self, row: usize) -> &[f32] {
            &self.sq_distances[row * self.k..(row + 1) * self.k]
        }

        /// Euclidean distances of a local row.
        pub fn distances_row(&self, row: usize) -> Vec<f32> {
            self.sq_distances_row(row).iter().map(|d| d.sqrt()).collect()
        }

        pub fn indices_row(&self, row: usize) -> &[i64] {
            &self.indices[row * self.k..(row + 1) * self.k]
        }
    };
}

impl ChunkTopK {
    row_accessors!();

    pub fn rows(&self) -> usize {
        self.query_range.len()
    }
}

impl NeighborTable {
    row_accessors!();

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Every retained `(query, neighbor, squared distance)` entry.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f32)> + '_ {
        (0..self.len()).flat_map(move |q| {
            self.indices_row(q)
                .iter()
                .zip(self.sq_distances_row(q))
                .filter(|(&j, _)| j != NO_NEIGHBOR)
                .map(move |(&j, &d)| (q, j as usize, d))
        })
    }
}

/// `(squared distance, index)` packed so that integer order is the
/// lexicographic order. Distances are non-negative, and the bit patterns of
/// non-negative floats sort like the floats themselves.
#[inline]
fn pack(d: f32, j: u32) -> u64 {
    // folds -0.0 into +0.0
    (((d + 0.0).to_bits() as u64) << 32) | j as u64
}

#[inline]
fn unpack(key: u64) -> (f32, i64) {
    (f32::from_bits((key >> 32) as u32), (key & 0xffff_ffff) as i64)
}

/// Bounded candidate list. Candidates are buffered and pruned back to the
/// best `k` with a selection whenever the buffer doubles, so each offer is
/// amortized O(1).
struct Best {
    k: usize,
    items: Vec<u64>,
    /// Worst kept key after the last prune.
    bound: u64,
    /// Distance part of `bound`; a quick reject before packing.
    bound_dist: f32,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::new(),
            bound: u64::MAX,
            bound_dist: f32::INFINITY,
        }
    }

    #[inline]
    fn offer(&mut self, d: f32, j: u32) {
        if d > self.bound_dist {
            return;
        }
        let key = pack(d, j);
        if key > self.bound {
            return;
        }
        self.items.push(key);
        if self.items.len() >= 2 * self.k.max(32) {
            self.prune();
        }
    }

    fn prune(&mut self) {
        if self.items.len() > self.k {
            self.items.select_nth_unstable(self.k - 1);
            self.items.truncate(self.k);
            self.bound = self.items.iter().copied().max().unwrap_or(u64::MAX);
            self.bound_dist = unpack(self.bound).0;
        }
    }

    fn write(&mut self, dist: &mut [f32], idx: &mut [i64]) {
        self.prune();
        self.items.sort_unstable();
        for (slot, (d, i)) in dist.iter_mut().zip(idx.iter_mut()).enumerate() {
            (*d, *i) = match self.items.get(slot) {
                Some(&key) => unpack(key),
                None => (f32::INFINITY, NO_NEIGHBOR),
            };
        }
    }
}

fn check_range(r: &Range<usize>, n: usize, what: &str) -> Result<()> {
    if r.start > r.end || r.end > n {
        return Err(Error::InvalidParameter(format!(
            "{what} {r:?} is not inside [0, {n})"
        )));
    }
    Ok(())
}

/// k smallest Euclidean distances from each query to the reference items,
/// excluding the query itself. Ties go to the lower global index.
pub fn chunk_topk(
    set: &EmbeddingSet,
    query_range: Range<usize>,
    ref_range: Range<usize>,
    k: usize,
) -> Result<ChunkTopK> {
    let norms = sq_norms(set.as_slice(), set.dim());
    chunk_topk_with_norms(set, &norms, query_range, ref_range, k)
}

const TILE: usize = 4;
const REF_BLOCK: usize = 256;

pub(crate) fn chunk_topk_with_norms(
    set: &EmbeddingSet,
    norms: &[f32],
    query_range: Range<usize>,
    ref_range: Range<usize>,
    k: usize,
) -> Result<ChunkTopK> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if query_range.is_empty() {
        return Err(Error::InvalidParameter("empty query range".into()));
    }
    check_range(&query_range, set.len(), "query range")?;
    check_range(&ref_range, set.len(), "reference range")?;
    if set.len() > u32::MAX as usize {
        return Err(Error::InvalidParameter("more than 2^32 items".into()));
    }

    let rows = query_range.len();
    let mut sq_distances = vec![0f32; rows * k];
    let mut indices = vec![0i64; rows * k];

    let q0 = query_range.start;
    sq_distances
        .par_chunks_mut(TILE * k)
        .zip(indices.par_chunks_mut(TILE * k))
        .enumerate()
        .for_each(|(tile, (dist_out, idx_out))| {
            let first = q0 + tile * TILE;
            let count = dist_out.len() / k;
            let mut best: Vec<Best> = (0..count).map(|_| Best::new(k)).collect();
            // a short final tile repeats its first query; extra lanes are ignored
            let queries: [usize; TILE] = std::array::from_fn(|t| first + if t < count { t } else { 0 });
            let q = queries.map(|i| set.row(i));
            let dim = set.dim();
            let mut dots = Vec::with_capacity(REF_BLOCK);

            let mut block = ref_range.start;
            while block < ref_range.end {
                let block_end = (block + REF_BLOCK).min(ref_range.end);
                dot4_block(q, &set.as_slice()[block * dim..block_end * dim], dim, &mut dots);
                for (t, b) in best.iter_mut().enumerate() {
                    let qi = queries[t];
                    let nq = norms[qi];
                    for (j, d4) in (block..block_end).zip(&dots) {
                        if qi != j {
                            b.offer(combine(nq, norms[j], d4[t]), j as u32);
                        }
                    }
                }
                block = block_end;
            }

            for (t, b) in best.iter_mut().enumerate() {
                b.write(
                    &mut dist_out[t * k..(t + 1) * k],
                    &mut idx_out[t * k..(t + 1) * k],
                );
            }
        });

    Ok(ChunkTopK {
        query_range,
        ref_range,
        k,
        sq_distances,
        indices,
    })
}

/// Merges partial tables into the global `N x k` table, where `N` is the
/// largest range end among the partials. Each query must be covered by
/// partials whose reference ranges tile `[0, N)` exactly once.
pub fn merge_topk(partials: &[ChunkTopK], k: usize) -> Result<NeighborTable> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if let Some(p) = partials.iter().find(|p| p.k != k) {
        return Err(Error::Coverage(format!(
            "partial for queries {:?} has k = {}, expected {k}",
            p.query_range, p.k
        )));
    }
    let n = partials
        .iter()
        .map(|p| p.query_range.end.max(p.ref_range.end))
        .max()
        .unwrap_or(0);

    // which partials touch each query, as (partial, local row)
    let mut cover: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (pi, p) in partials.iter().enumerate() {
        for (row, q) in p.query_range.clone().enumerate() {
            cover[q].push((pi, row));
        }
    }

    let mut sq_distances = vec![0f32; n * k];
    let mut indices = vec![0i64; n * k];
    for (q, hits) in cover.iter().enumerate() {
        let hits: Vec<(&ChunkTopK, usize)> =
            hits.iter().map(|&(pi, row)| (&partials[pi], row)).collect();
        merge_row(
            hits,
            q,
            n,
            &mut sq_distances[q * k..(q + 1) * k],
            &mut indices[q * k..(q + 1) * k],
        )?;
    }

    Ok(NeighborTable {
        k,
        sq_distances,
        indices,
    })
}

/// Merges the partials of one query block (all sharing `query_range`).
pub(crate) fn merge_query_block(
    partials: &[ChunkTopK],
    query_range: Range<usize>,
    n: usize,
    k: usize,
) -> Result<NeighborTable> {
    if let Some(p) = partials
        .iter()
        .find(|p| p.k != k || p.query_range != query_range)
    {
        return Err(Error::Coverage(format!(
            "partial for queries {:?} (k = {}) does not belong to block {query_range:?} (k = {k})",
            p.query_range, p.k
        )));
    }
    let rows = query_range.len();
    let mut sq_distances = vec![0f32; rows * k];
    let mut indices = vec![0i64; rows * k];
    for (row, q) in query_range.enumerate() {
        merge_row(
            partials.iter().map(|p| (p, row)).collect(),
            q,
            n,
            &mut sq_distances[row * k..(row + 1) * k],
            &mut indices[row * k..(row + 1) * k],
        )?;
    }
    Ok(NeighborTable {
        k,
        sq_distances,
        indices,
    })
}

impl NeighborTable {
    /// Stacks query blocks in order.
    pub(crate) fn concat(k: usize, blocks: Vec<NeighborTable>) -> NeighborTable {
        let mut sq_distances = Vec::new();
        let mut indices = Vec::new();
        for b in blocks {
            debug_assert_eq!(b.k, k);
            sq_distances.extend(b.sq_distances);
            indices.extend(b.indices);
        }
        NeighborTable {
            k,
            sq_distances,
            indices,
        }
    }
}

/// k-way merge of one query's rows. Reference ranges must tile `[0, n)`.
fn merge_row(
    mut hits: Vec<(&ChunkTopK, usize)>,
    q: usize,
    n: usize,
    dist_row: &mut [f32],
    idx_row: &mut [i64],
) -> Result<()> {
    hits.sort_by_key(|(p, _)| (p.ref_range.start, p.ref_range.end));
    let mut reach = 0;
    for (p, _) in &hits {
        let r = &p.ref_range;
        if r.is_empty() {
            continue;
        }
        if r.start != reach {
            return Err(Error::Coverage(format!(
                "query {q}: reference {} at {reach}, next chunk starts at {}",
                if r.start > reach { "gap" } else { "overlap" },
                r.start
            )));
        }
        reach = r.end;
    }
    if reach != n {
        return Err(Error::Coverage(format!(
            "query {q}: references covered only up to {reach} of {n}"
        )));
    }

    // each partial row is already sorted; merge them pairwise
    let k = dist_row.len();
    let mut merged: Vec<u64> = Vec::new();
    let mut next = Vec::with_capacity(2 * k);
    for &(p, row) in &hits {
        let keys = p
            .sq_distances_row(row)
            .iter()
            .zip(p.indices_row(row))
            .take_while(|(_, &j)| j != NO_NEIGHBOR)
            .map(|(&d, &j)| pack(d, j as u32));
        next.clear();
        let mut a = merged.iter().copied().peekable();
        let mut b = keys.peekable();
        while next.len() < k {
            let take = match (a.peek(), b.peek()) {
                (Some(&x), Some(&y)) => {
                    if x <= y {
                        a.next()
                    } else {
                        b.next()
                    }
                }
                (Some(_), None) => a.next(),
                (None, Some(_)) => b.next(),
                (None, None) => break,
            };
            next.extend(take);
        }
        std::mem::swap(&mut merged, &mut next);
    }

    for (slot, (d, i)) in dist_row.iter_mut().zip(idx_row.iter_mut()).enumerate() {
        (*d, *i) = match merged.get(slot) {
            Some(&key) => unpack(key),
            None => (f32::INFINITY, NO_NEIGHBOR),
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::sq_distance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        crate::embedding::normalize(&EmbeddingSet::new(d, data).unwrap()).unwrap()
    }

    #[test]
    fn twin_rows_are_zero_apart() {
        let s = EmbeddingSet::from_rows(&[[0.6f32, 0.8], [0.6, 0.8]]).unwrap();
        let t = chunk_topk(&s, 0..2, 0..2, 1).unwrap();
        assert_eq!(t.indices_row(0), &[1]);
        assert_eq!(t.indices_row(1), &[0]);
        assert_eq!(t.sq_distances_row(0), &[0.0]);
    }

    #[test]
    fn orthogonal_units_are_sqrt2_apart() {
        let s = EmbeddingSet::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
        let t = chunk_topk(&s, 0..1, 0..2, 1).unwrap();
        assert!((t.distances_row(0)[0] - std::f32::consts::SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn short_reference_chunk_is_padded() {
        let s = random_unit_set(5, 3, 1);
        let t = chunk_topk(&s, 0..5, 0..2, 3).unwrap();
        // query 0 sees only item 1
        assert_eq!(t.indices_row(0)[1..], [NO_NEIGHBOR, NO_NEIGHBOR]);
        assert!(t.sq_distances_row(0)[1].is_infinite());
        assert_eq!(t.indices_row(4)[2], NO_NEIGHBOR);
    }

    #[test]
    fn rejects_bad_parameters() {
        let s = random_unit_set(4, 3, 1);
        assert!(chunk_topk(&s, 0..4, 0..4, 0).is_err());
        assert!(chunk_topk(&s, 2..2, 0..4, 1).is_err());
        assert!(chunk_topk(&s, 0..5, 0..4, 1).is_err());
    }

    #[test]
    fn matches_full_sort_oracle() {
        let (n, k) = (50, 5);
        let s = random_unit_set(n, 8, 7);
        let t = chunk_topk(&s, 0..n, 0..n, k).unwrap();
        for q in 0..n {
            let mut all: Vec<(f32, i64)> = (0..n)
                .filter(|&j| j != q)
                .map(|j| (sq_distance(s.row(q), s.row(j)), j as i64))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want_idx: Vec<i64> = all[..k].iter().map(|p| p.1).collect();
            let want_d: Vec<f32> = all[..k].iter().map(|p| p.0).collect();
            assert_eq!(t.indices_row(q), want_idx.as_slice());
            assert_eq!(t.sq_distances_row(q), want_d.as_slice());
        }
    }

    #[test]
    fn identity_merge_and_two_way_merge() {
        let s = random_unit_set(20, 4, 3);
        let whole = chunk_topk(&s, 0..20, 0..20, 4).unwrap();
        let merged = merge_topk(std::slice::from_ref(&whole), 4).unwrap();
        for q in 0..20 {
            assert_eq!(merged.indices_row(q), whole.indices_row(q));
            assert_eq!(merged.sq_distances_row(q), whole.sq_distances_row(q));
        }

        let a = chunk_topk(&s, 0..20, 0..9, 4).unwrap();
        let b = chunk_topk(&s, 0..20, 9..20, 4).unwrap();
        let ab = merge_topk(&[a.clone(), b.clone()], 4).unwrap();
        let ba = merge_topk(&[b, a], 4).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(ab, merged);
    }

    #[test]
    fn merge_detects_gaps_overlaps_and_k() {
        let s = random_unit_set(10, 4, 3);
        let a = chunk_topk(&s, 0..10, 0..4, 2).unwrap();
        let c = chunk_topk(&s, 0..10, 6..10, 2).unwrap();
        assert!(matches!(merge_topk(&[a.clone(), c], 2), Err(Error::Coverage(_))));
        let over = chunk_topk(&s, 0..10, 2..10, 2).unwrap();
        assert!(matches!(merge_topk(&[a.clone(), over], 2), Err(Error::Coverage(_))));
        let k3 = chunk_topk(&s, 0..10, 4..10, 3).unwrap();
        assert!(matches!(merge_topk(&[a, k3], 2), Err(Error::Coverage(_))));
    }
}
