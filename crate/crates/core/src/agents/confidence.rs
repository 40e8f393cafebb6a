//! Generation confidence from per-token probabilities.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfidenceError {
    #[error("no token probabilities")]
    Empty,
    #[error("token probability {value} at position {index} is not in (0, 1]")]
    OutOfRange { index: usize, value: f64 },
}

/// Geometric mean of token probabilities, `exp(mean(ln p))`.
pub fn generation_confidence<T: Scalar>(token_probs: &[T]) -> Result<T, ConfidenceError> {
    if token_probs.is_empty() {
        return Err(ConfidenceError::Empty);
    }
    let mut log_sum = T::zero();
    for (index, &p) in token_probs.iter().enumerate() {
        if !(p > T::zero() && p <= T::one()) {
            return Err(ConfidenceError::OutOfRange {
                index,
                value: p.as_f64(),
            });
        }
        log_sum = log_sum + p.ln();
    }
    let mean = log_sum / T::lit(token_probs.len() as f64);
    Ok(mean.exp().clamp_to(T::zero(), T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(generation_confidence(&[1.0f64, 1.0, 1.0]).unwrap(), 1.0);
        assert!((generation_confidence(&[0.5f64, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        // oracle: cube root of the product
        let oracle = (0.9f64 * 0.4 * 0.7).powf(1.0 / 3.0);
        let got = generation_confidence(&[0.9f64, 0.4, 0.7]).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.6316).abs() < 5e-5);
    }

    #[test]
    fn errors() {
        assert_eq!(generation_confidence::<f64>(&[]), Err(ConfidenceError::Empty));
        assert!(matches!(
            generation_confidence(&[0.5, 0.0]),
            Err(ConfidenceError::OutOfRange { index: 1, .. })
        ));
        assert!(generation_confidence(&[1.2f32]).is_err());
    }

    proptest! {
        #[test]
        fn bounded_by_min_and_max(ps in prop::collection::vec(1e-6f64..=1.0, 1..50)) {
            let g = generation_confidence(&ps).unwrap();
            let lo = ps.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ps.iter().cloned().fold(0.0, f64::max);
            prop_assert!(g >= lo * (1.0 - 1e-12) && g <= hi * (1.0 + 1e-12));
        }
    }
}
