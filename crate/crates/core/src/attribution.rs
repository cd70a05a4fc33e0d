//! Step feasibility, image-span extraction and the gradient-weighted base CAM.

use serde::{Deserialize, Serialize};

use crate::data::{
    FeatureStack, GradientStack, PlaneStack, SampleMetadata, SequenceFeatures, StepRecord,
};
use crate::error::{Error, Result};
use crate::map::ActivationMap;

/// Feasibility verdict for one logged step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepVerdict {
    pub t: i64,
    pub seq_len: usize,
    pub img_end: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub per_step: Vec<StepVerdict>,
    pub valid_count: usize,
    pub total_count: usize,
    pub valid_ratio: f64,
}

impl FeasibilityReport {
    fn from_verdicts(per_step: Vec<StepVerdict>) -> Self {
        let valid_count = per_step.iter().filter(|v| v.valid).count();
        let total_count = per_step.len();
        let valid_ratio = if total_count == 0 {
            0.0
        } else {
            valid_count as f64 / total_count as f64
        };
        Self {
            per_step,
            valid_count,
            total_count,
            valid_ratio,
        }
    }

    /// Pools step records across samples into one aggregate report.
    pub fn pooled<'a>(reports: impl IntoIterator<Item = &'a FeasibilityReport>) -> Self {
        Self::from_verdicts(
            reports
                .into_iter()
                .flat_map(|r| r.per_step.iter().copied())
                .collect(),
        )
    }

    /// Earliest valid step by `t`.
    pub fn earliest_valid(&self) -> Option<StepVerdict> {
        self.per_step
            .iter()
            .filter(|v| v.valid)
            .min_by_key(|v| v.t)
            .copied()
    }

    /// First valid step among `preferred` (in the given order), falling back
    /// to the earliest valid step when `preferred` is empty.
    pub fn select(&self, preferred: &[i64]) -> Option<StepVerdict> {
        if preferred.is_empty() {
            return self.earliest_valid();
        }
        preferred
            .iter()
            .find_map(|t| self.per_step.iter().find(|v| v.valid && v.t == *t))
            .copied()
    }
}

fn verdict(step: &StepRecord, default_img_end: usize) -> StepVerdict {
    let img_end = step.img_end.unwrap_or(default_img_end);
    StepVerdict {
        t: step.t,
        seq_len: step.seq_len,
        img_end,
        valid: step.seq_len >= img_end,
    }
}

/// Marks each step valid iff its hooked hidden state still holds the whole
/// image span (`seq_len >= img_end`).
pub fn check_step_feasibility(meta: &SampleMetadata) -> Result<FeasibilityReport> {
    if meta.steps.is_empty() {
        return Err(Error::NoSteps);
    }
    let default_end = meta.default_img_end();
    Ok(FeasibilityReport::from_verdicts(
        meta.steps.iter().map(|s| verdict(s, default_end)).collect(),
    ))
}

/// Selects rows `[n_base, n_base + H*W)` and reshapes them into `D` planes.
pub fn extract_image_span(
    hidden: &SequenceFeatures,
    meta: &SampleMetadata,
    step_index: usize,
) -> Result<FeatureStack> {
    let (h, w) = (meta.grid_h(), meta.grid_w());
    let start = meta.n_base;
    let end = start + h * w;
    if hidden.len() < end {
        return Err(Error::SpanOutOfRange {
            start,
            end,
            len: hidden.len(),
        });
    }
    let d = hidden.dim();
    let n = h * w;
    let mut data = vec![0.0; d * n];
    for p in 0..n {
        for (c, v) in hidden.row(start + p).iter().enumerate() {
            data[c * n + p] = *v;
        }
    }
    Ok(FeatureStack(PlaneStack::new(d, h, w, data, step_index)?))
}

/// Channel weights `w_c`: the spatial mean of each gradient plane.
pub fn channel_weights(gradients: &GradientStack) -> Vec<f64> {
    let n = (gradients.height() * gradients.width()) as f64;
    gradients
        .planes()
        .map(|p| p.iter().sum::<f64>() / n)
        .collect()
}

/// Signed combination `sum_c w_c * A_c`, before rectification.
pub fn weighted_combination(
    features: &FeatureStack,
    gradients: &GradientStack,
) -> Result<Vec<f64>> {
    if features.shape() != gradients.shape() {
        return Err(Error::ShapeMismatch(format!(
            "features are {:?}, gradients are {:?}",
            features.shape(),
            gradients.shape()
        )));
    }
    let weights = channel_weights(gradients);
    let mut out = vec![0.0; features.height() * features.width()];
    for (plane, w) in features.planes().zip(&weights) {
        for (o, a) in out.iter_mut().zip(plane) {
            *o += w * a;
        }
    }
    Ok(out)
}

/// Rectified CAM before normalization.
pub fn base_cam_unnormalized(
    features: &FeatureStack,
    gradients: &GradientStack,
) -> Result<ActivationMap> {
    let combined = weighted_combination(features, gradients)?;
    let relu = combined.into_iter().map(|v| v.max(0.0)).collect();
    Ok(ActivationMap::from_valid(
        features.height(),
        features.width(),
        relu,
    ))
}

/// Gradient-weighted CAM: `ReLU(sum_c w_c A_c)`, min-max normalized.
pub fn base_cam(features: &FeatureStack, gradients: &GradientStack) -> Result<ActivationMap> {
    Ok(base_cam_unnormalized(features, gradients)?.normalized())
}

/// One base CAM per token-specific gradient stack.
pub fn per_token_cam(
    features: &FeatureStack,
    per_token_gradients: &[GradientStack],
) -> Result<Vec<ActivationMap>> {
    per_token_gradients
        .iter()
        .map(|g| base_cam(features, g))
        .collect()
}

/// Fixed-threshold selection used by the comparison baseline: entries
/// below `threshold` are zeroed.
pub fn baseline_fixed_threshold(map: &ActivationMap, threshold: f64) -> ActivationMap {
    let values = map
        .values()
        .iter()
        .map(|v| if *v < threshold { 0.0 } else { *v })
        .collect();
    let out = ActivationMap::from_valid(map.height(), map.width(), values);
    if map.is_normalized() {
        out.normalized()
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenInfo;
    use proptest::prelude::*;

    fn meta(n_base: usize, h: usize, w: usize, steps: Vec<StepRecord>) -> SampleMetadata {
        SampleMetadata {
            sample_id: "t".into(),
            n_base,
            grid: [h, w],
            hidden_dim: 1,
            steps,
            tokens: Vec::<TokenInfo>::new(),
            response_text: String::new(),
            variant_label: None,
            mask_manifest: vec![],
        }
    }

    fn step(t: i64, seq_len: usize, img_end: usize) -> StepRecord {
        StepRecord {
            t,
            seq_len,
            img_end: Some(img_end),
        }
    }

    fn stack(d: usize, h: usize, w: usize, data: Vec<f64>) -> PlaneStack {
        PlaneStack::new(d, h, w, data, 0).unwrap()
    }

    #[test]
    fn prefix_step_passes_later_steps_fail() {
        let m = meta(23, 22, 24, vec![step(0, 579, 551), step(8, 64, 551)]);
        let r = check_step_feasibility(&m).unwrap();
        assert!(r.per_step[0].valid);
        assert!(!r.per_step[1].valid);
        assert_eq!(r.valid_count, 1);
        assert_eq!(r.earliest_valid().unwrap().t, 0);
    }

    #[test]
    fn missing_img_end_uses_packing_offsets() {
        let m = meta(
            2,
            2,
            2,
            vec![
                StepRecord {
                    t: 0,
                    seq_len: 6,
                    img_end: None,
                },
                StepRecord {
                    t: 1,
                    seq_len: 5,
                    img_end: None,
                },
            ],
        );
        let r = check_step_feasibility(&m).unwrap();
        assert_eq!(r.per_step[0].img_end, 6);
        assert_eq!((r.per_step[0].valid, r.per_step[1].valid), (true, false));
    }

    #[test]
    fn empty_steps_is_an_error() {
        assert!(matches!(
            check_step_feasibility(&meta(0, 1, 1, vec![])),
            Err(Error::NoSteps)
        ));
    }

    #[test]
    fn pooled_ratio() {
        let m = meta(
            0,
            1,
            1,
            vec![step(0, 579, 551), step(1, 64, 551), step(2, 64, 551)],
        );
        let r = check_step_feasibility(&m).unwrap();
        let pooled = FeasibilityReport::pooled([&r, &r]);
        assert_eq!((pooled.valid_count, pooled.total_count), (2, 6));
        assert!((pooled.valid_ratio - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn step_override_list() {
        let m = meta(0, 1, 1, vec![step(0, 5, 1), step(4, 5, 1), step(8, 0, 1)]);
        let r = check_step_feasibility(&m).unwrap();
        assert_eq!(r.select(&[8, 4]).unwrap().t, 4);
        assert_eq!(r.select(&[]).unwrap().t, 0);
        assert!(r.select(&[8]).is_none());
    }

    #[test]
    fn span_slicing() {
        let seq = SequenceFeatures::new(6, 1, vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = extract_image_span(&seq, &meta(2, 2, 2, vec![]), 0).unwrap();
        assert_eq!(f.plane(0), &[1.0, 2.0, 3.0, 4.0]);

        let short = SequenceFeatures::new(5, 1, vec![0.0; 5]).unwrap();
        assert!(matches!(
            extract_image_span(&short, &meta(2, 2, 2, vec![]), 0),
            Err(Error::SpanOutOfRange {
                start: 2,
                end: 6,
                len: 5
            })
        ));
    }

    #[test]
    fn span_bound_matches_feasibility_arithmetic() {
        // 528 image tokens after a 23-token prefix end at 551 <= 579.
        let m = meta(23, 22, 24, vec![]);
        assert_eq!(m.default_img_end(), 551);
        let ok = SequenceFeatures::new(579, 1, vec![0.0; 579]).unwrap();
        assert!(extract_image_span(&ok, &m, 0).is_ok());
        let bad = SequenceFeatures::new(64, 1, vec![0.0; 64]).unwrap();
        assert!(extract_image_span(&bad, &m, 0).is_err());
    }

    #[test]
    fn span_interleaves_channels() {
        // rows are tokens, columns channels
        let seq = SequenceFeatures::new(3, 2, vec![0.0, 0.0, 1.0, 10.0, 2.0, 20.0]).unwrap();
        let f = extract_image_span(&seq, &meta(1, 1, 2, vec![]), 0).unwrap();
        assert_eq!(f.plane(0), &[1.0, 2.0]);
        assert_eq!(f.plane(1), &[10.0, 20.0]);
    }

    #[test]
    fn base_cam_examples() {
        let feats = FeatureStack(stack(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let ones = GradientStack(stack(1, 2, 2, vec![1.0; 4]));
        assert_eq!(
            base_cam_unnormalized(&feats, &ones).unwrap().values(),
            &[1.0, 2.0, 3.0, 4.0]
        );
        let zeros = GradientStack(stack(1, 2, 2, vec![0.0; 4]));
        assert_eq!(base_cam(&feats, &zeros).unwrap().values(), &[0.0; 4]);

        // w = (1, -1): [1,0,0,1] - [0,2,2,0] -> ReLU -> [1,0,0,1]
        let feats = FeatureStack(stack(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 2.0, 2.0, 0.0]));
        let grads = GradientStack(stack(
            2,
            2,
            2,
            vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0],
        ));
        assert_eq!(channel_weights(&grads), vec![1.0, -1.0]);
        assert_eq!(
            base_cam_unnormalized(&feats, &grads).unwrap().values(),
            &[1.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn shape_mismatch() {
        let feats = FeatureStack(stack(1, 2, 2, vec![0.0; 4]));
        let grads = GradientStack(stack(2, 2, 2, vec![0.0; 8]));
        assert!(matches!(
            base_cam(&feats, &grads),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn fixed_threshold_baseline() {
        let m = ActivationMap::new(1, 2, vec![0.3, 0.5]).unwrap();
        assert_eq!(baseline_fixed_threshold(&m, 0.4).values(), &[0.0, 0.5]);
        let m = ActivationMap::new(1, 2, vec![0.4, 0.9]).unwrap();
        assert_eq!(baseline_fixed_threshold(&m, 0.4).values(), m.values());
        assert_eq!(baseline_fixed_threshold(&m, 0.0).values(), m.values());
    }

    #[test]
    fn per_token_matches_base() {
        let feats = FeatureStack(stack(1, 1, 3, vec![1.0, 2.0, 3.0]));
        let g1 = GradientStack(stack(1, 1, 3, vec![1.0; 3]));
        let g2 = GradientStack(stack(1, 1, 3, vec![-1.0; 3]));
        let maps = per_token_cam(&feats, &[g1.clone(), g2]).unwrap();
        assert_eq!(maps[0], base_cam(&feats, &g1).unwrap());
        assert_eq!(maps[1].values(), &[0.0; 3]);
    }

    fn arb_pair() -> impl Strategy<Value = (FeatureStack, GradientStack)> {
        (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(d, h, w)| {
            let n = d * h * w;
            (
                proptest::collection::vec(-5.0f64..5.0, n),
                proptest::collection::vec(-5.0f64..5.0, n),
            )
                .prop_map(move |(a, g)| {
                    (
                        FeatureStack(stack(d, h, w, a)),
                        GradientStack(stack(d, h, w, g)),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn base_cam_non_negative((f, g) in arb_pair()) {
            prop_assert!(base_cam(&f, &g).unwrap().values().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn power_of_two_gradient_scaling_is_bit_identical((f, g) in arb_pair(), e in -3i32..4) {
            let k = 2f64.powi(e);
            let scaled = GradientStack(g.map_values(|v| v * k).unwrap());
            prop_assert_eq!(base_cam(&f, &g).unwrap(), base_cam(&f, &scaled).unwrap());
        }

        #[test]
        fn positive_gradient_scaling_preserves_normalized_cam((f, g) in arb_pair(), k in 0.01f64..100.0) {
            let scaled = GradientStack(g.map_values(|v| v * k).unwrap());
            let a = base_cam(&f, &g).unwrap();
            let b = base_cam(&f, &scaled).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn sign_flip_splits_absolute_value((f, g) in arb_pair()) {
            let neg = GradientStack(g.map_values(|v| -v).unwrap());
            let pos = base_cam_unnormalized(&f, &g).unwrap();
            let flipped = base_cam_unnormalized(&f, &neg).unwrap();
            let signed = weighted_combination(&f, &g).unwrap();
            for ((p, q), s) in pos.values().iter().zip(flipped.values()).zip(&signed) {
                prop_assert!((p + q - s.abs()).abs() <= 1e-12 * (1.0 + s.abs()));
                prop_assert!(*p == 0.0 || *q == 0.0);
            }
        }

        #[test]
        fn feasibility_commutes_with_permutation(
            steps in proptest::collection::vec((0i64..100, 0usize..700, 0usize..700), 1..20),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let records: Vec<_> = steps.iter().map(|(t, s, e)| step(*t, *s, *e)).collect();
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<_> = order.iter().map(|i| records[*i]).collect();
            let a = check_step_feasibility(&meta(0, 1, 1, records)).unwrap();
            let b = check_step_feasibility(&meta(0, 1, 1, shuffled)).unwrap();
            for (pos, i) in order.iter().enumerate() {
                prop_assert_eq!(b.per_step[pos], a.per_step[*i]);
            }
            prop_assert_eq!(a.valid_ratio, b.valid_ratio);
        }
    }
}
