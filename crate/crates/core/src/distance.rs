//! Squared Euclidean distance kernels.
//!
//! Rows are compared through `||a||^2 + ||b||^2 - 2 a.b`, clamped at zero.
//! Every pair is reduced in the same lane order, so `sq_distance(a, b)`
//! is bit-identical to `sq_distance(b, a)` and to the value produced by the
//! tiled kernel. Identical rows give exactly `0.0`.

pub(crate) const LANES: usize = 8;

#[inline(always)]
fn reduce_lanes(acc: &[f32; LANES]) -> f32 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline(always)]
fn lanes(chunk: &[f32]) -> &[f32; LANES] {
    chunk.try_into().expect("chunk of LANES values")
}

/// Dot product with eight interleaved partial sums.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "dot of rows with different lengths");
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX, checked above.
        return unsafe { x86::dot_avx(a, b) };
    }
    dot_portable(a, b)
}

#[inline(always)]
fn dot_portable(a: &[f32], b: &[f32]) -> f32 {
    let body = a.len() / LANES * LANES;
    let mut acc = [0f32; LANES];
    for (ca, cb) in a[..body]
        .chunks_exact(LANES)
        .zip(b[..body].chunks_exact(LANES))
    {
        let (ca, cb) = (lanes(ca), lanes(cb));
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0f32;
    for (x, y) in a[body..].iter().zip(&b[body..]) {
        tail += x * y;
    }
    reduce_lanes(&acc) + tail
}

/// Four dot products against one shared row, each reduced exactly as [`dot`].
#[inline(always)]
pub(crate) fn dot4(q: [&[f32]; 4], r: &[f32]) -> [f32; 4] {
    let dim = r.len();
    let body = dim / LANES * LANES;
    let mut a0 = [0f32; LANES];
    let mut a1 = [0f32; LANES];
    let mut a2 = [0f32; LANES];
    let mut a3 = [0f32; LANES];
    let chunks = r[..body]
        .chunks_exact(LANES)
        .zip(q[0][..body].chunks_exact(LANES))
        .zip(q[1][..body].chunks_exact(LANES))
        .zip(q[2][..body].chunks_exact(LANES))
        .zip(q[3][..body].chunks_exact(LANES));
    for ((((rc, c0), c1), c2), c3) in chunks {
        let (rc, c0, c1, c2, c3) = (lanes(rc), lanes(c0), lanes(c1), lanes(c2), lanes(c3));
        for l in 0..LANES {
            a0[l] += c0[l] * rc[l];
            a1[l] += c1[l] * rc[l];
            a2[l] += c2[l] * rc[l];
            a3[l] += c3[l] * rc[l];
        }
    }
    let mut out = [
        reduce_lanes(&a0),
        reduce_lanes(&a1),
        reduce_lanes(&a2),
        reduce_lanes(&a3),
    ];
    for (t, o) in out.iter_mut().enumerate() {
        let mut tail = 0f32;
        for (x, y) in q[t][body..].iter().zip(&r[body..]) {
            tail += x * y;
        }
        *o += tail;
    }
    out
}

/// `out[r] = dot4(q, row r of refs)` for every `dim`-wide row of `refs`.
///
/// Uses AVX when the CPU has it. Multiplies and adds stay separate (no
/// fused multiply-add), so the result is bit-identical to the portable path.
pub(crate) fn dot4_block(q: [&[f32]; 4], refs: &[f32], dim: usize, out: &mut Vec<[f32; 4]>) {
    out.clear();
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX, checked above.
        unsafe { x86::dot4_block_avx(q, refs, dim, out) };
        return;
    }
    out.extend(refs.chunks_exact(dim).map(|r| dot4(q, r)));
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::LANES;
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx")]
    pub(super) unsafe fn dot_avx(a: &[f32], b: &[f32]) -> f32 {
        let body = a.len() / LANES * LANES;
        let mut acc = _mm256_setzero_ps();
        let mut c = 0;
        while c < body {
            // SAFETY: c + LANES <= body <= a.len() == b.len()
            let p = _mm256_mul_ps(
                _mm256_loadu_ps(a.as_ptr().add(c)),
                _mm256_loadu_ps(b.as_ptr().add(c)),
            );
            acc = _mm256_add_ps(acc, p);
            c += LANES;
        }
        // same association as `reduce_lanes`
        let h1 = _mm256_hadd_ps(acc, acc);
        let h = _mm256_hadd_ps(h1, h1);
        let sum = _mm_add_ss(_mm256_castps256_ps128(h), _mm256_extractf128_ps(h, 1));
        let mut tail = 0f32;
        for (x, y) in a[body..].iter().zip(&b[body..]) {
            tail += x * y;
        }
        _mm_cvtss_f32(sum) + tail
    }

    #[target_feature(enable = "avx")]
    pub(super) unsafe fn dot4_block_avx(
        q: [&[f32]; 4],
        refs: &[f32],
        dim: usize,
        out: &mut Vec<[f32; 4]>,
    ) {
        let body = dim / LANES * LANES;
        for q in &q {
            assert_eq!(q.len(), dim);
        }
        for r in refs.chunks_exact(dim) {
            let mut acc = [_mm256_setzero_ps(); 4];
            let mut c = 0;
            while c < body {
                // SAFETY: c + LANES <= body <= dim, the length of r and every q[t]
                let rv = _mm256_loadu_ps(r.as_ptr().add(c));
                for t in 0..4 {
                    let qv = _mm256_loadu_ps(q[t].as_ptr().add(c));
                    acc[t] = _mm256_add_ps(acc[t], _mm256_mul_ps(qv, rv));
                }
                c += LANES;
            }
            // hadd twice then fold the halves: lane t ends up as
            // ((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7)) of acc[t],
            // the same association as `reduce_lanes`
            let h = _mm256_hadd_ps(
                _mm256_hadd_ps(acc[0], acc[1]),
                _mm256_hadd_ps(acc[2], acc[3]),
            );
            let sums = _mm_add_ps(_mm256_castps256_ps128(h), _mm256_extractf128_ps(h, 1));
            let mut tails = [0f32; 4];
            for (t, tail) in tails.iter_mut().enumerate() {
                for (x, y) in q[t][body..].iter().zip(&r[body..]) {
                    *tail += x * y;
                }
            }
            let mut d = [0f32; 4];
            _mm_storeu_ps(
                d.as_mut_ptr(),
                _mm_add_ps(sums, _mm_loadu_ps(tails.as_ptr())),
            );
            out.push(d);
        }
    }
}

#[inline]
pub(crate) fn combine(norm_a: f32, norm_b: f32, dot_ab: f32) -> f32 {
    ((norm_a + norm_b) - 2.0 * dot_ab).max(0.0)
}

/// Squared L2 norm of every row, reduced like [`dot`].
pub fn sq_norms(data: &[f32], dim: usize) -> Vec<f32> {
    data.chunks_exact(dim).map(|r| dot(r, r)).collect()
}

/// Squared Euclidean distance between two rows.
#[inline]
pub fn sq_distance(a: &[f32], b: &[f32]) -> f32 {
    combine(dot(a, a), dot(b, b), dot(a, b))
}

/// Strict threshold predicate shared by every grouping path:
/// `sqrt(sq) < beta`, evaluated as `sq < beta^2` in f64.
#[inline]
pub(crate) fn within(sq: f32, beta_sq: f64) -> bool {
    (sq as f64) < beta_sq
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn symmetric_and_matches_tile(
            dim in 1usize..40,
            seed in proptest::collection::vec(-8.0f32..8.0, 5 * 40),
        ) {
            let rows: Vec<&[f32]> = (0..5).map(|i| &seed[i * 40..i * 40 + dim]).collect();
            let q = [rows[0], rows[1], rows[2], rows[3]];
            let tile = dot4(q, rows[4]);
            let mut block = Vec::new();
            dot4_block(q, &seed[4 * 40..4 * 40 + dim], dim, &mut block);
            for t in 0..4 {
                let d = dot(rows[t], rows[4]);
                prop_assert_eq!(tile[t].to_bits(), d.to_bits());
                prop_assert_eq!(block[0][t].to_bits(), d.to_bits());
                prop_assert_eq!(dot_portable(rows[t], rows[4]).to_bits(), d.to_bits());
                prop_assert_eq!(
                    sq_distance(rows[t], rows[4]).to_bits(),
                    sq_distance(rows[4], rows[t]).to_bits()
                );
            }
            let naive: f64 = rows[0].iter().zip(rows[4]).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
            prop_assert!((sq_distance(rows[0], rows[4]) as f64 - naive).abs() < 1e-4 * naive.max(1.0));
        }
    }

    #[test]
    fn identical_rows_are_zero_apart() {
        let a = [0.3f32, -0.1, 0.7, 0.2, 0.11, 0.5, -0.33, 0.9, 0.01];
        assert_eq!(sq_distance(&a, &a), 0.0);
    }
}
