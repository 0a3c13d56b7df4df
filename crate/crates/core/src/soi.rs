//! Slices-of-interest filtering.
//!
//! A per-slice probability signal is smoothed with a centered moving average
//! and thresholded; the segment spans the first through the last slice whose
//! smoothed value exceeds the threshold. Gaps inside that span are kept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ScanRecord;

pub const DEFAULT_THRESHOLD: f64 = 0.4;
pub const DEFAULT_WINDOW: usize = 5;

/// Per-slice probability that the slice shows an adrenal gland.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilitySignal {
    pub scan_id: String,
    pub probs: Vec<f64>,
}

impl ProbabilitySignal {
    pub fn validate(&self, n_slices: usize) -> Result<()> {
        let record = format!("probabilities for scan {}", self.scan_id);
        if self.probs.len() != n_slices {
            return Err(Error::validation(
                record,
                format!("length {} != n_slices {n_slices}", self.probs.len()),
            ));
        }
        if let Some((i, p)) = self
            .probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::validation(
                record,
                format!("slice {i} probability {p} outside [0, 1]"),
            ));
        }
        Ok(())
    }
}

/// Inclusive slice index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceSegment {
    pub first: usize,
    pub last: usize,
}

impl SliceSegment {
    pub fn new(first: usize, last: usize) -> Result<Self> {
        if first > last {
            return Err(Error::InvalidInput(format!(
                "segment first {first} exceeds last {last}"
            )));
        }
        Ok(SliceSegment { first, last })
    }

    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, slice: usize) -> bool {
        (self.first..=self.last).contains(&slice)
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }

    /// Clamp `[center - radius, center + radius]` to this segment. `center`
    /// must lie inside the segment.
    pub fn window_around(&self, center: usize, radius: usize) -> SliceSegment {
        SliceSegment {
            first: center.saturating_sub(radius).max(self.first),
            last: (center + radius).min(self.last),
        }
    }
}

/// Centered moving average. Windows truncated at the signal boundary divide
/// by the number of samples they actually cover.
pub fn moving_average(signal: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "moving-average window must be odd and positive, got {window}"
        )));
    }
    if signal.is_empty() {
        return Err(Error::InvalidArgument("empty signal".into()));
    }
    let half = (window - 1) / 2;
    let n = signal.len();
    Ok((0..n)
        .map(|i| {
            let span = &signal[i.saturating_sub(half)..=(i + half).min(n - 1)];
            let mean = span.iter().sum::<f64>() / span.len() as f64;
            // keep rounding from escaping the window's own range
            let (lo, hi) = span
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            mean.clamp(lo, hi)
        })
        .collect())
}

/// Smooth, threshold, and span the above-threshold slices. `None` when no
/// smoothed value exceeds `threshold`.
pub fn extract_segment(
    probs: &[f64],
    threshold: f64,
    window: usize,
) -> Result<Option<SliceSegment>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let smoothed = moving_average(probs, window)?;
    let mut potential = smoothed
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > threshold)
        .map(|(i, _)| i);
    Ok(potential.next().map(|first| {
        let last = potential.next_back().unwrap_or(first);
        SliceSegment { first, last }
    }))
}

/// Jaccard similarity of the two index sets.
pub fn segment_iou_1d(pred: SliceSegment, actual: SliceSegment) -> f64 {
    let lo = pred.first.max(actual.first);
    let hi = pred.last.min(actual.last);
    let inter = if lo <= hi { hi - lo + 1 } else { 0 };
    let union = pred.len() + actual.len() - inter;
    inter as f64 / union as f64
}

/// Normalized boundary margins `(left, right)`. Positive when the prediction
/// extends past the actual boundary, negative when it falls short.
///
/// Note the sign convention: coverage is positive on both sides, so
/// `left = (actual.first - pred.first) / n` and
/// `right = (pred.last - actual.last) / n`.
pub fn segment_overhangs(pred: SliceSegment, actual: SliceSegment, n: usize) -> (f64, f64) {
    let n = n as f64;
    let left = (actual.first as f64 - pred.first as f64) / n;
    let right = (pred.last as f64 - actual.last as f64) / n;
    (left, right)
}

/// Annotated span of a scan widened by `pad` slices per side.
pub fn ground_truth_segment(scan: &ScanRecord, pad: usize) -> Option<SliceSegment> {
    let (first, last) = scan.annotated_span()?;
    Some(SliceSegment {
        first: first.saturating_sub(pad),
        last: (last + pad).min(scan.n_slices - 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(a: usize, b: usize) -> SliceSegment {
        SliceSegment::new(a, b).unwrap()
    }

    #[test]
    fn constant_signal_is_unchanged() {
        assert_eq!(moving_average(&[1.0; 5], 5).unwrap(), vec![1.0; 5]);
    }

    #[test]
    fn interior_window_mean() {
        let ma = moving_average(&[0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0], 5).unwrap();
        assert!((ma[3] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn truncated_window_divides_by_actual_count() {
        let ma = moving_average(&[0.5, 1.0], 5).unwrap();
        assert!((ma[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn even_or_zero_window_rejected() {
        assert!(matches!(
            moving_average(&[1.0], 4),
            Err(Error::InvalidArgument(_))
        ));
        assert!(moving_average(&[1.0], 0).is_err());
        assert!(moving_average(&[], 3).is_err());
    }

    #[test]
    fn segment_spans_min_to_max() {
        // window 1 leaves the values as given
        let s = extract_segment(&[0.1, 0.5, 0.2, 0.6, 0.1], 0.4, 1).unwrap();
        assert_eq!(s, Some(seg(1, 3)));
    }

    #[test]
    fn zero_signal_has_no_segment() {
        assert_eq!(extract_segment(&[0.0; 9], 0.4, 5).unwrap(), None);
    }

    #[test]
    fn full_span_when_everything_passes() {
        assert_eq!(
            extract_segment(&[0.9; 12], 0.4, 5).unwrap(),
            Some(seg(0, 11))
        );
    }

    #[test]
    fn threshold_outside_unit_interval_rejected() {
        assert!(extract_segment(&[0.5], 1.0, 1).is_err());
        assert!(extract_segment(&[0.5], 0.0, 1).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(segment_iou_1d(seg(10, 20), seg(10, 20)), 1.0);
        assert!((segment_iou_1d(seg(15, 25), seg(10, 20)) - 0.375).abs() < 1e-12);
        assert_eq!(segment_iou_1d(seg(0, 4), seg(10, 12)), 0.0);
    }

    #[test]
    fn overhang_examples() {
        let (l, r) = segment_overhangs(seg(20, 70), seg(30, 60), 100);
        assert!((l - 0.10).abs() < 1e-12 && (r - 0.10).abs() < 1e-12);
        assert_eq!(segment_overhangs(seg(30, 60), seg(30, 60), 100), (0.0, 0.0));
        let (l, r) = segment_overhangs(seg(35, 55), seg(30, 60), 100);
        assert!((l + 0.05).abs() < 1e-12 && (r + 0.05).abs() < 1e-12);
    }

    #[test]
    fn window_around_clamps_to_segment() {
        let s = seg(10, 20);
        assert_eq!(s.window_around(11, 2), seg(10, 13));
        assert_eq!(s.window_around(20, 3), seg(17, 20));
    }

    fn segment_strategy() -> impl Strategy<Value = SliceSegment> {
        (0usize..60, 0usize..30).prop_map(|(a, len)| seg(a, a + len))
    }

    proptest! {
        #[test]
        fn window_one_is_identity(v in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            prop_assert_eq!(moving_average(&v, 1).unwrap(), v);
        }

        #[test]
        fn extracted_segment_contains_every_passing_index(
            v in prop::collection::vec(0.0f64..=1.0, 1..60),
            th in 0.05f64..0.95,
        ) {
            let ma = moving_average(&v, 5).unwrap();
            if let Some(s) = extract_segment(&v, th, 5).unwrap() {
                for (i, m) in ma.iter().enumerate() {
                    if *m > th {
                        prop_assert!(s.contains(i));
                    }
                }
                prop_assert!(ma[s.first] > th && ma[s.last] > th);
            } else {
                prop_assert!(ma.iter().all(|m| *m <= th));
            }
        }

        #[test]
        fn overhangs_nonnegative_iff_covering(p in segment_strategy(), a in segment_strategy()) {
            let (l, r) = segment_overhangs(p, a, 100);
            let covers = p.first <= a.first && p.last >= a.last;
            prop_assert_eq!(l >= 0.0 && r >= 0.0, covers);
        }
    }
}
