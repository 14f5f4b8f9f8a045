use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `ceil(x)` that treats values within 1e-9 of an integer as that integer,
/// so `0.1 * 990` yields 99 rather than 100.
fn ceil_tolerant(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Positive classes plus a uniform sample, without replacement, of
/// `ceil(rate * (k - |positives|))` negative classes. Sorted, deterministic
/// per seed.
pub fn sample_negatives(k: usize, rate: f64, positives: &[usize], seed: u64) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "negative sampling rate must lie in (0, 1], got {rate}"
        )));
    }
    let mut is_positive = vec![false; k];
    for &p in positives {
        if p >= k {
            return Err(Error::InvalidParameter(format!(
                "positive class {p} outside [0, {k})"
            )));
        }
        is_positive[p] = true;
    }
    let negatives: Vec<usize> = (0..k).filter(|&c| !is_positive[c]).collect();
    let want = ceil_tolerant(rate * negatives.len() as f64).min(negatives.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = (0..k).filter(|&c| is_positive[c]).collect();
    out.extend(
        rand::seq::index::sample(&mut rng, negatives.len(), want)
            .into_iter()
            .map(|s| negatives[s]),
    );
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rate_returns_everything() {
        assert_eq!(sample_negatives(7, 1.0, &[2, 5], 0).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn sample_size() {
        let s = sample_negatives(1000, 0.1, &[3, 10, 500, 999], 1).unwrap();
        assert_eq!(s.len(), 4 + 100);
        for p in [3, 10, 500, 999] {
            assert!(s.binary_search(&p).is_ok());
        }
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_negatives(1000, 0.1, &(0..10).collect::<Vec<_>>(), 1).unwrap().len(), 10 + 99);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = sample_negatives(500, 0.3, &[1, 2], 42).unwrap();
        assert_eq!(a, sample_negatives(500, 0.3, &[1, 2], 42).unwrap());
        assert_ne!(a, sample_negatives(500, 0.3, &[1, 2], 43).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(sample_negatives(5, 0.0, &[], 0).is_err());
        assert!(sample_negatives(5, 1.5, &[], 0).is_err());
        assert!(sample_negatives(5, 0.5, &[5], 0).is_err());
    }
}
