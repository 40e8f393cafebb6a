//! Confidence/conflict weighting and deterministic evidence assembly.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::memory::ContextBundle;
use crate::model::{Finding, WeightedFinding};
use crate::scalar::{fmt3, Scalar};

/// Clamp margin applied to confidences and conflicts before taking logs.
pub const LOG_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error("no findings to fuse")]
    Empty,
    #[error("{confidences} confidences but {conflicts} conflict scores")]
    LengthMismatch { confidences: usize, conflicts: usize },
    #[error("{name}[{index}] = {value} is outside [0, 1]")]
    OutOfRange {
        name: &'static str,
        index: usize,
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    #[default]
    Weighted,
    NoAnnotation,
    InverseWeighted,
}

impl AnnotationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationMode::Weighted => "weighted",
            AnnotationMode::NoAnnotation => "no_annotation",
            AnnotationMode::InverseWeighted => "inverse_weighted",
        }
    }
}

impl FromStr for AnnotationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weighted" => Ok(Self::Weighted),
            "no_annotation" | "none" => Ok(Self::NoAnnotation),
            "inverse_weighted" | "inverse" => Ok(Self::InverseWeighted),
            other => Err(format!("unknown annotation mode {other:?}")),
        }
    }
}

/// Weights plus the indices whose inputs had to be clamped away from the
/// log singularities.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedWeights<T> {
    pub weights: Vec<T>,
    pub clamped: Vec<usize>,
}

/// `w = softmax(ln c + ln(1 - delta))`, computed in the log domain with the
/// max-logit shift.
///
/// Inputs must lie in `[0, 1]`. Confidences are clamped to `[eps, 1]` and
/// conflicts to `[0, 1 - eps]`; clamped positions are reported, not fatal.
pub fn compute_weights<T: Scalar>(
    confidences: &[T],
    conflicts: &[T],
) -> Result<FusedWeights<T>, FusionError> {
    if confidences.is_empty() {
        return Err(FusionError::Empty);
    }
    if confidences.len() != conflicts.len() {
        return Err(FusionError::LengthMismatch {
            confidences: confidences.len(),
            conflicts: conflicts.len(),
        });
    }
    let eps = T::lit(LOG_EPSILON);
    let mut clamped = Vec::new();
    let mut logits = Vec::with_capacity(confidences.len());
    for (i, (&c, &d)) in confidences.iter().zip(conflicts).enumerate() {
        if !c.in_unit_interval() {
            return Err(FusionError::OutOfRange {
                name: "confidence",
                index: i,
                value: c.as_f64(),
            });
        }
        if !d.in_unit_interval() {
            return Err(FusionError::OutOfRange {
                name: "conflict",
                index: i,
                value: d.as_f64(),
            });
        }
        let cc = c.clamp_to(eps, T::one());
        let dd = d.clamp_to(T::zero(), T::one() - eps);
        if cc != c || dd != d {
            tracing::warn!(index = i, confidence = %c, conflict = %d, "degenerate evidence clamped");
            clamped.push(i);
        }
        logits.push(cc.ln() + (T::one() - dd).ln());
    }
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|l| (*l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(FusedWeights {
        weights: exps.into_iter().map(|e| e / total).collect(),
        clamped,
    })
}

/// Orders findings by descending weight, ties by ascending specialist id.
pub fn sort_evidence(findings: &mut [WeightedFinding]) {
    findings.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.finding.specialist_id.cmp(&b.finding.specialist_id))
    });
}

/// Pairs findings with their conflict scores and weights, sorted.
pub fn weigh(findings: &[Finding], conflicts: &[f64], weights: &[f64]) -> Vec<WeightedFinding> {
    let mut out: Vec<WeightedFinding> = findings
        .iter()
        .zip(conflicts)
        .zip(weights)
        .map(|((f, d), w)| WeightedFinding {
            finding: f.clone(),
            conflict: *d,
            weight: *w,
        })
        .collect();
    sort_evidence(&mut out);
    out
}

/// Weight shown to the reasoner for each finding (in sorted order).
///
/// Inverse mode swaps the two weights when `k = 2`, reverses the weight list
/// against the descending order when `k > 2`, and shows `1 - c` for a single
/// finding.
pub fn displayed_weights(sorted: &[WeightedFinding], mode: AnnotationMode) -> Vec<Option<f64>> {
    match mode {
        AnnotationMode::Weighted => sorted.iter().map(|f| Some(f.weight)).collect(),
        AnnotationMode::NoAnnotation => vec![None; sorted.len()],
        AnnotationMode::InverseWeighted => {
            if sorted.len() == 1 {
                vec![Some(1.0 - sorted[0].finding.confidence)]
            } else {
                sorted.iter().rev().map(|f| Some(f.weight)).collect()
            }
        }
    }
}

/// Renders the reasoning input: a context block followed by one evidence
/// block per finding.
///
/// ```text
/// [CONTEXT]
/// <key>: <value>            (keys ascending)
/// [/CONTEXT]
/// [EVIDENCE specialist=<id> modality=<tag> weight=<0.xxx> confidence=<0.xxx>]
/// <diagnosis_text>
/// [/EVIDENCE]
/// ```
///
/// `no_annotation` drops the weight and confidence attributes.
pub fn assemble(
    context: &ContextBundle,
    findings: &[WeightedFinding],
    mode: AnnotationMode,
) -> Result<String, FusionError> {
    if findings.is_empty() {
        return Err(FusionError::Empty);
    }
    let mut sorted = findings.to_vec();
    sort_evidence(&mut sorted);
    let shown = displayed_weights(&sorted, mode);

    let mut out = String::from("[CONTEXT]\n");
    for (k, v) in &context.clinical_info {
        let _ = writeln!(out, "{k}: {v}");
    }
    out.push_str("[/CONTEXT]\n");
    for (wf, w) in sorted.iter().zip(shown) {
        let f = &wf.finding;
        match w {
            Some(w) => {
                let _ = writeln!(
                    out,
                    "[EVIDENCE specialist={} modality={} weight={} confidence={}]",
                    f.specialist_id,
                    f.modality_tag,
                    fmt3(w),
                    fmt3(f.confidence)
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "[EVIDENCE specialist={} modality={}]",
                    f.specialist_id, f.modality_tag
                );
            }
        }
        out.push_str(&f.diagnosis_text);
        out.push_str("\n[/EVIDENCE]\n");
    }
    Ok(out)
}

/// Fused evidence for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePackage {
    pub case_id: String,
    pub weighted_findings: Vec<WeightedFinding>,
    pub assembled_text: String,
    pub annotation_mode: AnnotationMode,
}

impl EvidencePackage {
    pub fn build(
        context: &ContextBundle,
        mut weighted_findings: Vec<WeightedFinding>,
        mode: AnnotationMode,
    ) -> Result<Self, FusionError> {
        sort_evidence(&mut weighted_findings);
        let assembled_text = assemble(context, &weighted_findings, mode)?;
        Ok(Self {
            case_id: context.case_id.clone(),
            weighted_findings,
            assembled_text,
            annotation_mode: mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Case;
    use chrono::{DateTime, Utc};
    use proptest::prelude::*;

    fn direct(c: &[f64], d: &[f64]) -> Vec<f64> {
        let p: Vec<f64> = c.iter().zip(d).map(|(c, d)| c * (1.0 - d)).collect();
        let s: f64 = p.iter().sum();
        p.iter().map(|x| x / s).collect()
    }

    fn finding(id: &str, tag: &str, text: &str, c: f64) -> Finding {
        Finding {
            specialist_id: id.into(),
            modality_tag: tag.into(),
            diagnosis_text: text.into(),
            confidence: c,
            produced_at: DateTime::<Utc>::UNIX_EPOCH,
        }
    }

    fn ctx() -> ContextBundle {
        let case = Case::new("c1")
            .with_info("symptoms", "dyspnea")
            .with_info("age", "67")
            .with_payload("ECHO", "-");
        ContextBundle::from_parts(&case, vec![], vec![])
    }

    #[test]
    fn single_finding_gets_full_weight() {
        assert_eq!(compute_weights(&[0.4], &[0.3]).unwrap().weights, vec![1.0]);
    }

    #[test]
    fn two_finding_example() {
        let w = compute_weights::<f64>(&[0.9, 0.5], &[0.1, 0.3]).unwrap().weights;
        // 0.81 / 1.16 and 0.35 / 1.16
        assert!((w[0] - 0.81 / 1.16).abs() < 1e-12);
        assert!((w[1] - 0.35 / 1.16).abs() < 1e-12);
        assert_eq!(fmt3(w[0]), "0.698");
        assert_eq!(fmt3(w[1]), "0.302");
    }

    #[test]
    fn symmetric_inputs_share_weight() {
        let w = compute_weights::<f64>(&[0.7; 4], &[0.2; 4]).unwrap().weights;
        for x in w {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn singularities_are_clamped_and_flagged() {
        let out = compute_weights(&[0.0, 0.8, 0.9], &[0.1, 1.0, 0.2]).unwrap();
        assert_eq!(out.clamped, vec![0, 1]);
        assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.weights[2] > 0.99);
    }

    #[test]
    fn input_errors() {
        assert_eq!(compute_weights::<f64>(&[], &[]), Err(FusionError::Empty));
        assert!(matches!(
            compute_weights(&[0.5], &[0.1, 0.2]),
            Err(FusionError::LengthMismatch { .. })
        ));
        assert!(matches!(
            compute_weights(&[1.5], &[0.1]),
            Err(FusionError::OutOfRange { name: "confidence", .. })
        ));
    }

    #[test]
    fn f32_weights() {
        let w = compute_weights(&[0.9f32, 0.5], &[0.1, 0.3]).unwrap().weights;
        assert!((w[0] - 0.698_275_9).abs() < 1e-6);
    }

    #[test]
    fn assemble_format_is_exact() {
        let findings = weigh(
            &[
                finding("ecg", "ECG", "sinus rhythm", 0.5),
                finding("echo", "ECHO", "reduced EF", 0.9),
            ],
            &[0.3, 0.1],
            &[0.35 / 1.16, 0.81 / 1.16],
        );
        let text = assemble(&ctx(), &findings, AnnotationMode::Weighted).unwrap();
        assert_eq!(
            text,
            "[CONTEXT]\nage: 67\nsymptoms: dyspnea\n[/CONTEXT]\n\
             [EVIDENCE specialist=echo modality=ECHO weight=0.698 confidence=0.900]\nreduced EF\n[/EVIDENCE]\n\
             [EVIDENCE specialist=ecg modality=ECG weight=0.302 confidence=0.500]\nsinus rhythm\n[/EVIDENCE]\n"
        );
        assert_eq!(
            text,
            assemble(&ctx(), &findings, AnnotationMode::Weighted).unwrap()
        );

        let bare = assemble(&ctx(), &findings, AnnotationMode::NoAnnotation).unwrap();
        assert!(!bare.contains("weight="));
        assert!(!bare.contains("confidence="));
        assert!(bare.contains("[EVIDENCE specialist=echo modality=ECHO]\n"));

        let inv = assemble(&ctx(), &findings, AnnotationMode::InverseWeighted).unwrap();
        assert!(inv.contains("specialist=echo modality=ECHO weight=0.302 confidence=0.900"));
        assert!(inv.contains("specialist=ecg modality=ECG weight=0.698 confidence=0.500"));
    }

    #[test]
    fn inverse_modes_for_one_and_three() {
        let one = weigh(&[finding("a", "X", "t", 0.8)], &[0.0], &[1.0]);
        assert_eq!(displayed_weights(&one, AnnotationMode::InverseWeighted), vec![Some(1.0 - 0.8)]);

        let three = weigh(
            &[
                finding("a", "X", "t", 0.8),
                finding("b", "Y", "t", 0.8),
                finding("c", "Z", "t", 0.8),
            ],
            &[0.0; 3],
            &[0.5, 0.3, 0.2],
        );
        assert_eq!(
            displayed_weights(&three, AnnotationMode::InverseWeighted),
            vec![Some(0.2), Some(0.3), Some(0.5)]
        );
    }

    #[test]
    fn ties_break_by_specialist_id() {
        let ws = weigh(
            &[finding("b", "X", "t", 0.5), finding("a", "Y", "t", 0.5)],
            &[0.0, 0.0],
            &[0.5, 0.5],
        );
        assert_eq!(ws[0].finding.specialist_id, "a");
    }

    #[test]
    fn empty_assembly_fails() {
        assert_eq!(
            assemble(&ctx(), &[], AnnotationMode::Weighted),
            Err(FusionError::Empty)
        );
    }

    fn inputs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..8).prop_flat_map(|k| {
            (
                prop::collection::vec(0.01f64..=1.0, k),
                prop::collection::vec(0.0f64..0.99, k),
            )
        })
    }

    proptest! {
        #[test]
        fn log_softmax_equals_direct_normalization((c, d) in inputs()) {
            let w = compute_weights(&c, &d).unwrap().weights;
            for (a, b) in w.iter().zip(direct(&c, &d)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn scale_free((c, d) in inputs(), s in 0.05f64..1.0) {
            let w = compute_weights(&c, &d).unwrap().weights;
            let scaled: Vec<f64> = c.iter().map(|x| x * s).collect();
            let ws = compute_weights(&scaled, &d).unwrap().weights;
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn monotone_in_confidence((c, d) in inputs().prop_filter("k>=2", |(c, _)| c.len() >= 2), bump in 0.01f64..0.5) {
            let w = compute_weights(&c, &d).unwrap().weights;
            let mut c2 = c.clone();
            c2[0] = (c2[0] * (1.0 + bump)).min(1.0);
            prop_assume!(c2[0] > c[0]);
            let w2 = compute_weights(&c2, &d).unwrap().weights;
            prop_assert!(w2[0] > w[0]);
        }
    }
}
