//! Semantic conflict between specialist findings.

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingBackend, EmbeddingError, EmbeddingVector};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConflictError {
    /// Fewer than two findings: conflict is structurally absent.
    #[error("conflict undefined for {0} finding(s)")]
    Undefined(usize),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Mean phrasing direction and the strength with which it is added before
/// re-normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct SharedDirectionConfig<T = f64> {
    pub mu: EmbeddingVector<T>,
    pub alpha: T,
    pub calibration_set_id: String,
}

/// `norm(e + alpha * mu)`.
pub fn adjust<T: Scalar>(
    e: &EmbeddingVector<T>,
    cfg: &SharedDirectionConfig<T>,
) -> Result<EmbeddingVector<T>, ConflictError> {
    if cfg.alpha < T::zero() || !cfg.alpha.is_finite() {
        return Err(EmbeddingError::NonFinite.into());
    }
    Ok(e.add_scaled(&cfg.mu, cfg.alpha)?.normalized()?)
}

/// `1 - (1 + cos(a, b)) / 2`, in `[0, 1]`.
pub fn pairwise_conflict<T: Scalar>(
    a: &EmbeddingVector<T>,
    b: &EmbeddingVector<T>,
) -> Result<T, ConflictError> {
    let sim = a.cosine(b)?;
    Ok(rescaled_disagreement(sim))
}

fn rescaled_disagreement<T: Scalar>(sim: T) -> T {
    let half = T::lit(0.5);
    (T::one() - (T::one() + sim) * half).clamp_to(T::zero(), T::one())
}

/// Per-specialist conflict: one minus the mean rescaled similarity to every
/// other specialist.
///
/// Each pair's similarity is computed once and credited to both rows, so the
/// `k = 2` case is exactly symmetric.
pub fn specialist_conflicts<T: Scalar>(
    embeddings: &[EmbeddingVector<T>],
) -> Result<Vec<T>, ConflictError> {
    let k = embeddings.len();
    if k <= 1 {
        return Err(ConflictError::Undefined(k));
    }
    let half = T::lit(0.5);
    let mut agreement = vec![T::zero(); k];
    for i in 0..k {
        for j in (i + 1)..k {
            let s = (T::one() + embeddings[i].cosine(&embeddings[j])?) * half;
            agreement[i] = agreement[i] + s;
            agreement[j] = agreement[j] + s;
        }
    }
    let denom = T::lit((k - 1) as f64);
    Ok(agreement
        .into_iter()
        .map(|a| (T::one() - a / denom).clamp_to(T::zero(), T::one()))
        .collect())
}

/// Applies the shared-direction adjustment (when configured) and scores.
pub fn conflicts_with_adjustment<T: Scalar>(
    embeddings: &[EmbeddingVector<T>],
    shared: Option<&SharedDirectionConfig<T>>,
) -> Result<Vec<T>, ConflictError> {
    match shared {
        Some(cfg) => {
            let adjusted = embeddings
                .iter()
                .map(|e| adjust(e, cfg))
                .collect::<Result<Vec<_>, _>>()?;
            specialist_conflicts(&adjusted)
        }
        None => specialist_conflicts(embeddings),
    }
}

/// Normalized mean embedding of the calibration texts.
pub async fn estimate_mu(
    calibration_texts: &[String],
    backend: &dyn EmbeddingBackend,
) -> Result<EmbeddingVector<f64>, ConflictError> {
    if calibration_texts.is_empty() {
        return Err(ConflictError::EmptyCalibration);
    }
    let vectors = backend.embed_batch(calibration_texts).await?;
    mean_direction(&vectors)
}

pub fn mean_direction<T: Scalar>(
    vectors: &[EmbeddingVector<T>],
) -> Result<EmbeddingVector<T>, ConflictError> {
    let first = vectors.first().ok_or(ConflictError::EmptyCalibration)?;
    let mut sum = vec![T::zero(); first.dim()];
    for v in vectors {
        if v.dim() != first.dim() {
            return Err(EmbeddingError::DimensionMismatch(first.dim(), v.dim()).into());
        }
        for (s, x) in sum.iter_mut().zip(v.values()) {
            *s = *s + *x;
        }
    }
    // Opposite vectors leave rounding residue rather than an exact zero.
    let tol = T::lit(1e-12) * T::lit(vectors.len() as f64);
    if sum.iter().all(|s| s.abs() <= tol) {
        return Err(EmbeddingError::ZeroVector.into());
    }
    Ok(EmbeddingVector::unit(sum)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashingEmbedder;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn v(xs: &[f64]) -> EmbeddingVector<f64> {
        EmbeddingVector::unit(xs.to_vec()).unwrap()
    }

    // Independent oracle: literal double loop over j != i.
    fn brute(es: &[EmbeddingVector<f64>]) -> Vec<f64> {
        let k = es.len();
        (0..k)
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..k {
                    if j != i {
                        let dot: f64 = es[i]
                            .values()
                            .iter()
                            .zip(es[j].values())
                            .map(|(a, b)| a * b)
                            .sum();
                        acc += (1.0 + dot) / 2.0;
                    }
                }
                1.0 - acc / (k as f64 - 1.0)
            })
            .collect()
    }

    #[test]
    fn adjust_identity_when_alpha_zero() {
        let e = v(&[0.6, 0.8]);
        let cfg = SharedDirectionConfig {
            mu: v(&[0.0, 1.0]),
            alpha: 0.0,
            calibration_set_id: "t".into(),
        };
        assert_eq!(adjust(&e, &cfg).unwrap(), e);
    }

    #[test]
    fn adjust_hand_computed() {
        let cfg = SharedDirectionConfig {
            mu: v(&[0.0, 1.0]),
            alpha: 1.0,
            calibration_set_id: "t".into(),
        };
        let out = adjust(&v(&[1.0, 0.0]), &cfg).unwrap();
        assert!((out.values()[0] - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((out.values()[1] - FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn adjust_singularity_is_an_error() {
        let cfg = SharedDirectionConfig {
            mu: v(&[0.0, 1.0]),
            alpha: 2.0,
            calibration_set_id: "t".into(),
        };
        let e = EmbeddingVector::new(vec![0.0, -2.0]).unwrap();
        assert_eq!(
            adjust(&e, &cfg),
            Err(ConflictError::Embedding(EmbeddingError::ZeroVector))
        );
    }

    #[test]
    fn pairwise_examples() {
        let a = v(&[1.0, 0.0]);
        assert_eq!(pairwise_conflict(&a, &a).unwrap(), 0.0);
        assert_eq!(pairwise_conflict(&a, &v(&[-1.0, 0.0])).unwrap(), 1.0);
        let b = v(&[0.6, 0.8]);
        assert!((pairwise_conflict(&a, &b).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn specialist_examples() {
        let a = v(&[1.0, 2.0, 3.0]);
        assert_eq!(
            specialist_conflicts(&[a.clone(), a.clone(), a]).unwrap(),
            vec![0.0; 3]
        );

        // sims from specialist 1: 0.8 (to 2) and 0.6 (to 3)
        let e1 = v(&[1.0, 0.0, 0.0]);
        let e2 = v(&[0.8, 0.6, 0.0]);
        let e3 = v(&[0.6, 0.0, 0.8]);
        let d = specialist_conflicts(&[e1, e2, e3]).unwrap();
        assert!((d[0] - 0.15).abs() < 1e-15);

        assert_eq!(
            specialist_conflicts(&[v(&[1.0, 0.0])]),
            Err(ConflictError::Undefined(1))
        );
        assert_eq!(specialist_conflicts::<f64>(&[]), Err(ConflictError::Undefined(0)));
    }

    #[test]
    fn two_specialists_reduce_to_pairwise() {
        let a = v(&[0.3, -0.2, 0.9]);
        let b = v(&[-0.5, 0.1, 0.4]);
        let d = specialist_conflicts(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(d[0], d[1]);
        assert!((d[0] - pairwise_conflict(&a, &b).unwrap()).abs() < 1e-15);
    }

    #[tokio::test]
    async fn estimate_mu_examples() {
        let backend = HashingEmbedder::default();
        let single = estimate_mu(&["mitral regurgitation".to_string()], &backend)
            .await
            .unwrap();
        let direct = backend.embed_sync("mitral regurgitation").unwrap();
        for (x, y) in single.values().iter().zip(direct.values()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(
            estimate_mu(&[], &backend).await,
            Err(ConflictError::EmptyCalibration)
        );

        let m = mean_direction(&[v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap();
        assert!((m.values()[0] - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            mean_direction(&[v(&[0.3, 0.7]), v(&[-0.3, -0.7])]),
            Err(ConflictError::Embedding(EmbeddingError::ZeroVector))
        ));
    }

    fn unit_vectors(k: usize, d: usize) -> impl Strategy<Value = Vec<EmbeddingVector<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), k).prop_filter_map(
            "non-zero",
            |rows| {
                rows.into_iter()
                    .map(|r| EmbeddingVector::unit(r).ok())
                    .collect::<Option<Vec<_>>>()
            },
        )
    }

    proptest! {
        #[test]
        fn matches_double_loop_oracle(es in (2usize..=6).prop_flat_map(|k| unit_vectors(k, 8))) {
            let got = specialist_conflicts(&es).unwrap();
            for (g, o) in got.iter().zip(brute(&es)) {
                prop_assert!((g - o).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(g));
            }
        }

        #[test]
        fn permutation_equivariant(es in unit_vectors(5, 6), rot in 0usize..5) {
            let base = specialist_conflicts(&es).unwrap();
            let mut perm = es.clone();
            perm.rotate_left(rot);
            let got = specialist_conflicts(&perm).unwrap();
            for i in 0..5 {
                prop_assert!((got[i] - base[(i + rot) % 5]).abs() < 1e-12);
            }
        }

        #[test]
        fn pairwise_symmetric(es in unit_vectors(2, 5)) {
            let ab = pairwise_conflict(&es[0], &es[1]).unwrap();
            let ba = pairwise_conflict(&es[1], &es[0]).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
