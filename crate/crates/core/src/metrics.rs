//! Confusion-matrix ratios, ROC analysis, box overlap, slice distance and the
//! majority-vote baseline.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::types::BoundingBox;

/// Operating-point thresholds reported for the reference model, used as
/// labeled presets.
pub const PRESET_THRESHOLD_A: f64 = 0.259;
pub const PRESET_THRESHOLD_B: f64 = 0.506;
pub const PRESET_THRESHOLD_C: f64 = 0.162;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

/// A ratio that may have had a zero denominator. Degenerate ratios report
/// zero rather than failing so batch reports stay total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

impl Ratio {
    fn of(num: f64, den: f64) -> Ratio {
        if den > 0.0 {
            Ratio {
                value: num / den,
                degenerate: false,
            }
        } else {
            Ratio {
                value: 0.0,
                degenerate: true,
            }
        }
    }
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fn_: u64, tn: u64, fp: u64) -> Self {
        ConfusionMatrix { tp, fn_, tn, fp }
    }

    /// Tally from `(predicted, actual)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut cm = ConfusionMatrix::default();
        for (pred, actual) in pairs {
            cm.record(pred, actual);
        }
        cm
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
        }
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn precision(&self) -> Ratio {
        Ratio::of(self.tp as f64, (self.tp + self.fp) as f64)
    }

    pub fn recall(&self) -> Ratio {
        Ratio::of(self.tp as f64, (self.tp + self.fn_) as f64)
    }

    pub fn f1(&self) -> Ratio {
        Ratio::of(
            self.tp as f64,
            self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64,
        )
    }

    pub fn npv(&self) -> Ratio {
        Ratio::of(self.tn as f64, (self.tn + self.fn_) as f64)
    }

    pub fn fpr(&self) -> Ratio {
        Ratio::of(self.fp as f64, (self.fp + self.tn) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Predictions with `score >= threshold` are positive. The first point
    /// uses `+inf` (serialized as `null`).
    #[serde(
        serialize_with = "serialize_threshold",
        deserialize_with = "deserialize_threshold"
    )]
    pub threshold: f64,
}

pub(crate) fn serialize_threshold<S: Serializer>(t: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if t.is_finite() {
        s.serialize_some(t)
    } else {
        s.serialize_none()
    }
}

pub(crate) fn deserialize_threshold<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Sorted by descending threshold, from (0, 0) to (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: u64,
    pub negatives: u64,
}

/// Build the ROC curve by sweeping every distinct score as a threshold.
/// The area is the trapezoidal sum, computed on integer counts so that it
/// matches the pairwise rank statistic with ties counted as one half.
pub fn roc_curve(scores: &[(f64, bool)]) -> Result<RocCurve> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score in ROC input".into()));
    }
    let positives = scores.iter().filter(|(_, l)| *l).count() as u64;
    let negatives = scores.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidInput(
            "ROC needs at least one positive and one negative".into(),
        ));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area, in units of 1 / (P * N)
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        let (prev_tp, prev_fp) = (tp, fp);
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += u128::from(fp - prev_fp) * u128::from(tp + prev_tp);
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold,
        });
    }
    let auc = area2 as f64 / (2.0 * positives as f64 * negatives as f64);
    Ok(RocCurve {
        points,
        auc,
        positives,
        negatives,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OperatingMode {
    /// Closest point to (fpr 0, tpr 1).
    TopLeft,
    /// Highest TPR with FPR at or below the cap.
    MaxTprAtFprCap { fpr_cap: f64 },
    /// Lowest FPR with TPR at or above the floor.
    MinFprAtTprFloor { tpr_floor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Select a point on the curve. Ties go to the lower threshold.
pub fn pick_operating_point(curve: &RocCurve, mode: OperatingMode) -> Result<OperatingPoint> {
    let cost = |p: &RocPoint| -> Option<(f64, f64)> {
        match mode {
            OperatingMode::TopLeft => Some((p.fpr.hypot(1.0 - p.tpr), 0.0)),
            OperatingMode::MaxTprAtFprCap { fpr_cap } => {
                (p.fpr <= fpr_cap).then_some((-p.tpr, p.fpr))
            }
            OperatingMode::MinFprAtTprFloor { tpr_floor } => {
                (p.tpr >= tpr_floor).then_some((p.fpr, -p.tpr))
            }
        }
    };
    // points run from high to low threshold, so `<=` keeps the lowest on ties
    let mut best: Option<(&RocPoint, (f64, f64))> = None;
    for p in &curve.points {
        if let Some(c) = cost(p) {
            if best.is_none_or(|(_, b)| c <= b) {
                best = Some((p, c));
            }
        }
    }
    let (p, _) = best.ok_or_else(|| Error::NoFeasiblePoint(format!("{mode:?}")))?;
    Ok(OperatingPoint {
        threshold: p.threshold,
        fpr: p.fpr,
        tpr: p.tpr,
    })
}

/// How box area is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaConvention {
    /// Half-open real rectangles: area = (x_br - x_tl) * (y_br - y_tl).
    #[default]
    Continuous,
    /// Inclusive pixel grid: each side counts one extra pixel.
    PixelGrid,
}

pub fn iou_2d(a: &BoundingBox, b: &BoundingBox) -> f64 {
    iou_2d_with(a, b, AreaConvention::Continuous)
}

pub fn iou_2d_with(a: &BoundingBox, b: &BoundingBox, convention: AreaConvention) -> f64 {
    let extra = match convention {
        AreaConvention::Continuous => 0.0,
        AreaConvention::PixelGrid => 1.0,
    };
    let area = |b: &BoundingBox| (b.width() + extra) * (b.height() + extra);
    let iw = (a.x_br.min(b.x_br) - a.x_tl.max(b.x_tl) + extra).max(0.0);
    let ih = (a.y_br.min(b.y_br) - a.y_tl.max(b.y_tl) + extra).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        // two degenerate boxes: identical ones overlap fully
        return if a == b { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Distance from the predicted slice to the nearest abnormal slice.
pub fn slice_distance(pred_slice: usize, abnormal_slices: &[usize]) -> Result<usize> {
    abnormal_slices
        .iter()
        .map(|&s| s.abs_diff(pred_slice))
        .min()
        .ok_or_else(|| Error::InvalidInput("no abnormal slices to measure against".into()))
}

/// Per-slice majority: strictly more than half of the models fired.
pub fn majority_row(row: &[bool]) -> bool {
    2 * row.iter().filter(|&&f| f).count() > row.len()
}

/// Length of the longest run of consecutive majority-positive slices.
pub fn longest_majority_run(flags: &[Vec<bool>]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for row in flags {
        if majority_row(row) {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}

/// Scan is positive iff some run of at least `s_min` consecutive slices is
/// majority-positive. `s_min = 0` accepts every scan.
pub fn majority_vote_baseline(flags: &[Vec<bool>], s_min: usize) -> bool {
    s_min == 0 || longest_majority_run(flags) >= s_min
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn table_b_column() {
        let cm = ConfusionMatrix::new(14, 20, 334, 7);
        assert!(close(cm.precision().value, 0.667, 0.0005));
        assert!(close(cm.npv().value, 0.944, 0.0005));
        assert!(close(cm.recall().value, 0.412, 0.0005));
        assert!(close(cm.f1().value, 0.509, 0.0005));
    }

    #[test]
    fn table_a_column() {
        let cm = ConfusionMatrix::new(24, 10, 312, 29);
        assert!(close(cm.precision().value, 0.453, 0.0005));
        assert!(close(cm.npv().value, 0.969, 0.0005));
        assert!(close(cm.recall().value, 0.706, 0.0005));
        assert!(close(cm.f1().value, 0.552, 0.0005));
    }

    #[test]
    fn empty_positive_predictions_are_degenerate() {
        let cm = ConfusionMatrix::new(0, 0, 10, 0);
        assert_eq!(
            cm.precision(),
            Ratio {
                value: 0.0,
                degenerate: true
            }
        );
        assert_eq!(cm.npv().value, 1.0);
        assert!(!cm.npv().degenerate);
    }

    #[test]
    fn roc_perfect_separation() {
        let c = roc_curve(&[(0.9, true), (0.8, true), (0.2, false)]).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.points.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(c.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
    }

    #[test]
    fn roc_constant_score_is_half() {
        let c = roc_curve(&[(0.3, true), (0.3, false), (0.3, false)]).unwrap();
        assert_eq!(c.auc, 0.5);
    }

    #[test]
    fn roc_pair_enumeration_example() {
        // (0.9,0.5) (0.9,0.1) (0.4,0.1) ranked correctly, (0.4,0.5) not: 3/4
        let c = roc_curve(&[(0.9, true), (0.4, true), (0.5, false), (0.1, false)]).unwrap();
        assert_eq!(c.auc, 0.75);
    }

    #[test]
    fn roc_single_class_rejected() {
        assert!(roc_curve(&[(0.1, true), (0.2, true)]).is_err());
    }

    #[test]
    fn roc_threshold_serializes_infinity_as_null() {
        let c = roc_curve(&[(0.9, true), (0.1, false)]).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"threshold\":null"));
        let back: RocCurve = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }

    fn curve(points: &[(f64, f64, f64)]) -> RocCurve {
        RocCurve {
            points: points
                .iter()
                .map(|&(fpr, tpr, threshold)| RocPoint {
                    fpr,
                    tpr,
                    threshold,
                })
                .collect(),
            auc: 0.0,
            positives: 1,
            negatives: 1,
        }
    }

    #[test]
    fn top_left_exact_corner() {
        let c = curve(&[(0.0, 0.0, 2.0), (0.0, 1.0, 0.7), (1.0, 1.0, 0.1)]);
        let p = pick_operating_point(&c, OperatingMode::TopLeft).unwrap();
        assert_eq!((p.fpr, p.tpr, p.threshold), (0.0, 1.0, 0.7));
    }

    #[test]
    fn top_left_prefers_smaller_distance() {
        let c = curve(&[
            (0.0, 0.0, 2.0),
            (0.1, 0.6, 0.8),
            (0.3, 0.9, 0.5),
            (1.0, 1.0, 0.1),
        ]);
        let p = pick_operating_point(&c, OperatingMode::TopLeft).unwrap();
        assert_eq!((p.fpr, p.tpr), (0.3, 0.9));
    }

    #[test]
    fn top_left_tie_takes_lower_threshold() {
        let c = curve(&[(0.0, 0.0, 2.0), (0.1, 0.9, 0.8), (0.1, 0.9, 0.6), (1.0, 1.0, 0.1)]);
        let p = pick_operating_point(&c, OperatingMode::TopLeft).unwrap();
        assert_eq!(p.threshold, 0.6);
    }

    #[test]
    fn cap_and_floor_modes() {
        let c = curve(&[
            (0.0, 0.0, 2.0),
            (0.02, 0.4, 0.5),
            (0.1, 0.7, 0.3),
            (0.3, 0.9, 0.15),
            (1.0, 1.0, 0.01),
        ]);
        let b = pick_operating_point(&c, OperatingMode::MaxTprAtFprCap { fpr_cap: 0.05 }).unwrap();
        assert_eq!(b.threshold, 0.5);
        let cc =
            pick_operating_point(&c, OperatingMode::MinFprAtTprFloor { tpr_floor: 0.85 }).unwrap();
        assert_eq!(cc.threshold, 0.15);
        assert!(matches!(
            pick_operating_point(&c, OperatingMode::MaxTprAtFprCap { fpr_cap: -0.1 }),
            Err(Error::NoFeasiblePoint(_))
        ));
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BoundingBox::new(5.0, 5.0, 15.0, 15.0).unwrap();
        let c = BoundingBox::new(10.0, 0.0, 20.0, 10.0).unwrap();
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert!(close(iou_2d(&a, &b), 25.0 / 175.0, 1e-12));
        assert_eq!(iou_2d(&a, &c), 0.0);
        // pixel grid: 11x11 boxes overlapping in 6x6
        assert!(close(
            iou_2d_with(&a, &b, AreaConvention::PixelGrid),
            36.0 / (121.0 + 121.0 - 36.0),
            1e-12
        ));
    }

    #[test]
    fn slice_distance_examples() {
        assert_eq!(slice_distance(5, &[3, 5]).unwrap(), 0);
        assert_eq!(slice_distance(10, &[3, 14]).unwrap(), 4);
        assert_eq!(slice_distance(0, &[0]).unwrap(), 0);
        assert!(slice_distance(1, &[]).is_err());
    }

    fn majority_flags(pattern: &[bool]) -> Vec<Vec<bool>> {
        pattern
            .iter()
            .map(|&m| vec![m, m, false])
            .collect()
    }

    #[test]
    fn majority_vote_runs() {
        let flags = majority_flags(&[true, true, false, true]);
        assert!(majority_vote_baseline(&flags, 2));
        assert!(!majority_vote_baseline(&flags, 3));
        assert!(majority_vote_baseline(&flags, 0));
        assert!(!majority_vote_baseline(&majority_flags(&[false; 6]), 1));
    }

    proptest! {
        #[test]
        fn ratios_bounded(tp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500, fp in 0u64..500) {
            let cm = ConfusionMatrix::new(tp, fn_, tn, fp);
            for r in [cm.precision(), cm.recall(), cm.f1(), cm.npv()] {
                prop_assert!((0.0..=1.0).contains(&r.value));
            }
            prop_assert_eq!(cm.f1().value == 0.0, tp == 0);
        }

        #[test]
        fn iou_symmetric_and_bounded(
            a in (0.0f64..50.0, 0.0f64..50.0, 0.1f64..30.0, 0.1f64..30.0),
            b in (0.0f64..50.0, 0.0f64..50.0, 0.1f64..30.0, 0.1f64..30.0),
        ) {
            let a = BoundingBox::new(a.0, a.1, a.0 + a.2, a.1 + a.3).unwrap();
            let b = BoundingBox::new(b.0, b.1, b.0 + b.2, b.1 + b.3).unwrap();
            let ab = iou_2d(&a, &b);
            prop_assert_eq!(ab, iou_2d(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
        }

        #[test]
        fn majority_vote_monotone_in_s_min(
            rows in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 0..30),
            s in 1usize..12,
        ) {
            if majority_vote_baseline(&rows, s) {
                prop_assert!(majority_vote_baseline(&rows, s - 1));
            }
        }
    }
}
