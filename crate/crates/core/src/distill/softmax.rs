use crate::error::{Error, Result};

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// `log(sum(exp(x)))` with the maximum factored out.
#[inline]
pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// In-place log-softmax.
pub(crate) fn log_softmax_in_place(logits: &mut [f64]) {
    let lse = log_sum_exp(logits.iter().copied());
    logits.iter_mut().for_each(|v| *v -= lse);
}

/// `softmax(logits / tau)`, stabilized by subtracting the maximum.
pub fn softmax_with_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if let Some(i) = logits.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("logit {i} is NaN")));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
    let mut out: Vec<f64> = logits.iter().map(|&v| (v / tau - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(softmax_with_temperature(&[2.0, 2.0, 2.0, 2.0], 0.5).unwrap(), vec![0.25; 4]);
        let p = softmax_with_temperature(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let p = softmax_with_temperature(&[5.0, -5.0], 1e6).unwrap();
        assert!(p.iter().all(|v| (v - 0.5).abs() < 1e-5));
        assert!(softmax_with_temperature(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(softmax_with_temperature(&[0.0], 0.0).is_err());
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let p = softmax_with_temperature(&[1000.0, 0.0], 0.01).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn sums_to_one_and_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..40),
            shift in -10.0f64..10.0,
            tau in 0.05f64..10.0,
        ) {
            let p = softmax_with_temperature(&logits, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let q = softmax_with_temperature(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
