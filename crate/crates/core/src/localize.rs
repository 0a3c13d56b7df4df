//! Per-side localization: the best-scoring slice of the smoothed ensemble
//! confidence and the mean box around it.

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleOutput;
use crate::error::{Error, Result};
use crate::soi::{SliceSegment, DEFAULT_WINDOW};
use crate::types::{BoundingBox, Side};

pub const DEFAULT_RADIUS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub scan_id: String,
    pub side: Side,
    pub slice: usize,
    #[serde(rename = "box")]
    pub bbox: Option<BoundingBox>,
    pub context: [usize; 2],
    /// Unsmoothed ensemble mean score at `slice`.
    pub mean_score: f64,
}

/// Mean score over the `k` models for each slice of the segment; a model
/// without a box for `side` contributes 0.
pub fn mean_scores(out: &EnsembleOutput, side: Side) -> Vec<f64> {
    let mut sums = vec![0.0; out.segment.len()];
    for d in out.detections.iter().filter(|d| d.side == side) {
        sums[d.slice_index - out.segment.first] += d.score;
    }
    let k = out.k as f64;
    sums.into_iter().map(|s| s / k).collect()
}

/// Position of the maximum of the smoothed scores. The window sum is always
/// divided by `window` (samples past either end count as 0). Equal smoothed
/// values go to the higher raw score, then to the lowest position.
pub fn best_slice(scores: &[f64], window: usize) -> Result<usize> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "window must be odd and positive, got {window}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores to smooth".into()));
    }
    let half = window / 2;
    let n = scores.len();
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            scores[i.saturating_sub(half)..=(i + half).min(n - 1)]
                .iter()
                .sum::<f64>()
                / window as f64
        })
        .collect();
    let mut best = 0;
    for i in 1..n {
        if (smooth[i], scores[i]) > (smooth[best], scores[best]) {
            best = i;
        }
    }
    Ok(best)
}

/// Coordinate-wise mean of every `side` box within `radius` slices of
/// `center` (clamped to the segment).
pub fn aggregate_box(
    out: &EnsembleOutput,
    side: Side,
    center: usize,
    radius: usize,
) -> Option<BoundingBox> {
    let window = out.segment.window_around(center, radius);
    let mut sum = [0.0; 4];
    let mut count = 0usize;
    for d in &out.detections {
        if d.side == side && window.contains(d.slice_index) {
            for (s, c) in sum.iter_mut().zip(d.bbox.coords()) {
                *s += c;
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let n = count as f64;
    // a mean of valid boxes is itself valid
    BoundingBox::new(sum[0] / n, sum[1] / n, sum[2] / n, sum[3] / n).ok()
}

pub fn localize(out: &EnsembleOutput, side: Side, radius: usize) -> Result<Localization> {
    localize_with(out, side, radius, DEFAULT_WINDOW)
}

pub fn localize_with(
    out: &EnsembleOutput,
    side: Side,
    radius: usize,
    window: usize,
) -> Result<Localization> {
    let scores = mean_scores(out, side);
    let pos = best_slice(&scores, window)?;
    let slice = out.segment.first + pos;
    let context: SliceSegment = out.segment.window_around(slice, radius);
    Ok(Localization {
        scan_id: out.scan_id.clone(),
        side,
        slice,
        bbox: aggregate_box(out, side, slice, radius),
        context: [context.first, context.last],
        mean_score: scores[pos],
    })
}

/// Copy with box coordinates rounded to one decimal, for reports.
pub fn rounded(loc: &Localization) -> Localization {
    let r = |v: f64| (v * 10.0).round() / 10.0;
    Localization {
        bbox: loc.bbox.and_then(|b| {
            let [a, c, d, e] = b.coords();
            BoundingBox::new(r(a), r(c), r(d), r(e)).ok()
        }),
        ..loc.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::DetectionRecord;
    use proptest::prelude::*;

    fn det(slice: usize, model: usize, side: Side, b: [f64; 4], score: f64) -> DetectionRecord {
        DetectionRecord {
            scan_id: "s".into(),
            slice_index: slice,
            model_id: model,
            side,
            bbox: BoundingBox::try_from(b).unwrap(),
            score,
        }
    }

    fn output(first: usize, last: usize, k: usize, dets: &[DetectionRecord]) -> EnsembleOutput {
        EnsembleOutput::new("s", k, SliceSegment::new(first, last).unwrap(), dets).unwrap()
    }

    #[test]
    fn single_model_contributes_one_fifth() {
        let out = output(0, 9, 5, &[det(3, 2, Side::Left, [0.0, 0.0, 1.0, 1.0], 1.0)]);
        let s = mean_scores(&out, Side::Left);
        assert!((s[3] - 0.2).abs() < 1e-15);
        assert!(mean_scores(&out, Side::Right).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_agreement_scores_one() {
        let dets: Vec<_> = (0..5)
            .map(|m| det(4, m, Side::Right, [0.0, 0.0, 1.0, 1.0], 1.0))
            .collect();
        let out = output(0, 9, 5, &dets);
        assert_eq!(mean_scores(&out, Side::Right)[4], 1.0);
    }

    #[test]
    fn best_slice_examples() {
        assert_eq!(best_slice(&[0.0, 0.0, 1.0, 0.0, 0.0], 5).unwrap(), 2);
        let mut two = vec![0.0; 11];
        two[2] = 1.0;
        two[8] = 1.0;
        assert_eq!(best_slice(&two, 5).unwrap(), 2);
        assert_eq!(best_slice(&[0.0; 6], 5).unwrap(), 0);
    }

    #[test]
    fn constant_scores_peak_where_the_window_is_full() {
        assert_eq!(best_slice(&[0.3; 7], 5).unwrap(), 2);
        assert_eq!(best_slice(&[0.3; 3], 5).unwrap(), 0);
    }

    #[test]
    fn plateau_resolves_to_its_start() {
        assert_eq!(best_slice(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0], 5).unwrap(), 6);
        assert_eq!(best_slice(&[0.5, 0.5, 0.5], 3).unwrap(), 1);
    }

    #[test]
    fn even_window_rejected() {
        assert!(best_slice(&[1.0], 4).is_err());
        assert!(best_slice(&[], 5).is_err());
    }

    #[test]
    fn box_means() {
        let same = [10.0, 20.0, 30.0, 40.0];
        let out = output(0, 9, 3, &[det(4, 0, Side::Left, same, 0.5), det(5, 1, Side::Left, same, 0.9)]);
        assert_eq!(aggregate_box(&out, Side::Left, 4, 2).unwrap().coords(), same);

        let out = output(
            0,
            9,
            2,
            &[
                det(4, 0, Side::Left, [0.0, 0.0, 10.0, 10.0], 0.5),
                det(6, 1, Side::Left, [10.0, 10.0, 20.0, 20.0], 0.5),
            ],
        );
        assert_eq!(
            aggregate_box(&out, Side::Left, 5, 2).unwrap().coords(),
            [5.0, 5.0, 15.0, 15.0]
        );
        assert!(aggregate_box(&out, Side::Right, 5, 2).is_none());
        assert!(aggregate_box(&out, Side::Left, 9, 2).is_none());
    }

    #[test]
    fn oracle_ensemble_is_forced() {
        let b = [100.0, 120.0, 140.0, 170.0];
        let dets: Vec<_> = (0..5).map(|m| det(7, m, Side::Right, b, 1.0)).collect();
        let out = output(2, 14, 5, &dets);
        let loc = localize(&out, Side::Right, 2).unwrap();
        assert_eq!(loc.slice, 7);
        assert_eq!(loc.bbox.unwrap().coords(), b);
        assert_eq!(loc.context, [5, 9]);
        assert_eq!(loc.mean_score, 1.0);
    }

    #[test]
    fn all_zero_scores_fall_back_to_first_slice() {
        let out = output(3, 8, 5, &[]);
        let loc = localize(&out, Side::Left, 2).unwrap();
        assert_eq!(loc.slice, 3);
        assert!(loc.bbox.is_none());
        assert_eq!(loc.context, [3, 5]);
    }

    #[test]
    fn report_rounding() {
        let out = output(0, 4, 3, &[
            det(2, 0, Side::Left, [1.0, 1.0, 2.0, 2.0], 0.5),
            det(2, 1, Side::Left, [1.0, 1.0, 2.0, 2.0], 0.5),
            det(2, 2, Side::Left, [2.0, 2.0, 3.0, 3.0], 0.5),
        ]);
        let loc = rounded(&localize(&out, Side::Left, 2).unwrap());
        assert_eq!(loc.bbox.unwrap().coords(), [1.3, 1.3, 2.3, 2.3]);
    }

    fn arb_dets(n: usize, k: usize) -> impl Strategy<Value = Vec<DetectionRecord>> {
        prop::collection::vec(
            (0..n, 0..k, prop::bool::ANY, 0.0..400.0f64, 0.0..400.0f64, 1.0..80.0f64, 0.01..1.0f64),
            0..40,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(s, m, left, x, y, w, score)| {
                    let side = if left { Side::Left } else { Side::Right };
                    det(s, m, side, [x, y, x + w, y + w * 0.8], score)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn best_slice_scale_invariant(
            scores in prop::collection::vec(0.0..1.0f64, 1..40),
            scale in prop::sample::select(vec![0.5, 2.0, 4.0, 0.25]),
        ) {
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            prop_assert_eq!(best_slice(&scores, 5).unwrap(), best_slice(&scaled, 5).unwrap());
        }

        #[test]
        fn isolated_peak_is_found(len in 1usize..40, at in 0usize..40, v in 0.01..1.0f64) {
            let at = at % len;
            let mut s = vec![0.0; len];
            s[at] = v;
            prop_assert_eq!(best_slice(&s, 5).unwrap(), at);
        }

        #[test]
        fn mean_box_within_envelope(dets in arb_dets(12, 4), center in 0usize..12) {
            let out = output(0, 11, 4, &dets);
            if let Some(b) = aggregate_box(&out, Side::Left, center, 2) {
                let win = out.segment.window_around(center, 2);
                let used: Vec<[f64; 4]> = out.detections.iter()
                    .filter(|d| d.side == Side::Left && win.contains(d.slice_index))
                    .map(|d| d.bbox.coords()).collect();
                for (c, v) in b.coords().iter().enumerate() {
                    let lo = used.iter().map(|u| u[c]).fold(f64::INFINITY, f64::min);
                    let hi = used.iter().map(|u| u[c]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
                }
            }
        }

        #[test]
        fn sides_are_independent(dets in arb_dets(12, 4)) {
            let out = output(0, 11, 4, &dets);
            let left_only: Vec<_> = dets.iter().filter(|d| d.side == Side::Left).cloned().collect();
            let out_left = output(0, 11, 4, &left_only);
            prop_assert_eq!(
                localize(&out, Side::Left, 2).unwrap(),
                localize(&out_left, Side::Left, 2).unwrap()
            );
        }
    }
}
