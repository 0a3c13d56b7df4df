//! Seeded synthetic scans: slice counts, annotations, slice-of-interest
//! probability signals and per-model detections.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::soi::{ProbabilitySignal, SliceSegment};
use crate::types::{BoundingBox, DetectionRecord, ScanRecord, Side, SliceLabel, Split};

/// Slice-level sensitivity of each detector on abnormal slices.
pub const DEFAULT_SENSITIVITY: [f64; 5] = [0.247, 0.337, 0.252, 0.236, 0.195];
/// Per-slice false-positive rate of each detector.
pub const DEFAULT_FP_RATE: [f64; 5] = [0.066, 0.047, 0.037, 0.045, 0.047];

const STREAM_DETECTIONS: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreDist {
    Beta { alpha: f64, beta: f64 },
    Fixed { value: f64 },
}

impl ScoreDist {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            ScoreDist::Beta { alpha, beta } => alpha > 0.0 && beta > 0.0,
            ScoreDist::Fixed { value } => (0.0..=1.0).contains(&value),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{name}: invalid score distribution {self:?}")))
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ScoreDist::Beta { alpha, beta } => Beta::new(alpha, beta)
                .expect("validated parameters")
                .sample(rng),
            ScoreDist::Fixed { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_scans: usize,
    pub mean_slices: f64,
    pub slice_stddev: f64,
    pub min_slices: usize,
    pub prevalence: f64,
    /// Left-to-right ratio of abnormal sides; 0.2 means 1:5.
    pub left_right_ratio: f64,
    /// Fraction of a scan's slices the probability signal marks as of interest.
    pub segment_fraction: f64,
    pub test_fraction: f64,
    pub image_dims: (usize, usize),
    pub sensitivity: Vec<f64>,
    pub fp_rate: Vec<f64>,
    /// Probability that a slice's detector draws share one latent variable.
    pub slice_correlation: f64,
    pub tp_score: ScoreDist,
    pub fp_score: ScoreDist,
    /// Uniform per-coordinate jitter in pixels, for labels and detections.
    pub box_jitter: f64,
    /// Inclusive bounds on the length of the abnormal slice run.
    pub abnormal_run: (usize, usize),
    /// Uniform noise amplitude on the probability signal.
    pub prob_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_scans: 200,
            mean_slices: 255.0,
            slice_stddev: 40.0,
            min_slices: 40,
            prevalence: 0.0976,
            left_right_ratio: 0.2,
            segment_fraction: 0.2,
            test_fraction: 0.3,
            image_dims: (512, 512),
            sensitivity: DEFAULT_SENSITIVITY.to_vec(),
            fp_rate: DEFAULT_FP_RATE.to_vec(),
            slice_correlation: 0.3,
            tp_score: ScoreDist::Beta {
                alpha: 4.0,
                beta: 2.0,
            },
            fp_score: ScoreDist::Beta {
                alpha: 2.0,
                beta: 4.0,
            },
            box_jitter: 3.0,
            abnormal_run: (8, 24),
            prob_noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Perfect detectors: every abnormal slice found by every model with the
    /// exact label box, nothing else.
    pub fn oracle() -> Self {
        let k = DEFAULT_SENSITIVITY.len();
        SynthConfig {
            sensitivity: vec![1.0; k],
            fp_rate: vec![0.0; k],
            box_jitter: 0.0,
            tp_score: ScoreDist::Fixed { value: 1.0 },
            ..SynthConfig::default()
        }
    }

    pub fn num_models(&self) -> usize {
        self.sensitivity.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synth: {m}")));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.n_scans < 2 {
            return fail(format!("n_scans must be at least 2, got {}", self.n_scans));
        }
        if !(self.mean_slices > 0.0) || !(self.slice_stddev >= 0.0) || self.min_slices < 5 {
            return fail("slice count distribution needs mean > 0, stddev >= 0, min_slices >= 5".into());
        }
        for (name, v) in [
            ("prevalence", self.prevalence),
            ("segment_fraction", self.segment_fraction),
            ("test_fraction", self.test_fraction),
            ("slice_correlation", self.slice_correlation),
            ("prob_noise", self.prob_noise),
        ] {
            if !unit(v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.segment_fraction == 0.0 {
            return fail("segment_fraction must be positive".into());
        }
        if !(self.left_right_ratio >= 0.0) || !self.left_right_ratio.is_finite() {
            return fail("left_right_ratio must be finite and non-negative".into());
        }
        if self.sensitivity.is_empty() || self.sensitivity.len() != self.fp_rate.len() {
            return fail(format!(
                "sensitivity ({}) and fp_rate ({}) need one entry per model",
                self.sensitivity.len(),
                self.fp_rate.len()
            ));
        }
        if let Some(v) = self.sensitivity.iter().chain(&self.fp_rate).find(|v| !unit(**v)) {
            return fail(format!("detector rates must lie in [0, 1], got {v}"));
        }
        let (h, w) = self.image_dims;
        if h < 128 || w < 128 {
            return fail(format!("image_dims must be at least 128x128, got {h}x{w}"));
        }
        if !(self.box_jitter >= 0.0) || self.box_jitter > 20.0 {
            return fail(format!("box_jitter must lie in [0, 20], got {}", self.box_jitter));
        }
        let (lo, hi) = self.abnormal_run;
        if lo < 3 || lo > hi {
            return fail(format!("abnormal_run must satisfy 3 <= min <= max, got {lo}..{hi}"));
        }
        if hi + 8 > self.min_slices {
            return fail(format!(
                "min_slices ({}) must exceed the longest abnormal run ({hi}) by at least 8",
                self.min_slices
            ));
        }
        self.tp_score.validate("tp_score")?;
        self.fp_score.validate("fp_score")
    }
}

/// Everything the generator decided for one scan beyond its record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanLayout {
    pub scan_id: String,
    /// Slices the probability signal marks as of interest.
    pub region: SliceSegment,
    /// Annotated slice span.
    pub span: SliceSegment,
    pub abnormal_side: Option<Side>,
    pub abnormal_run: Option<SliceSegment>,
    /// Gland centre `(x, y)` per side, left then right.
    pub centers: [(f64, f64); 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub layouts: Vec<ScanLayout>,
}

fn side_index(side: Side) -> usize {
    match side {
        Side::Left => 0,
        Side::Right => 1,
    }
}

fn make_box(cx: f64, cy: f64, w: f64, h: f64, dims: (usize, usize)) -> BoundingBox {
    let (ih, iw) = (dims.0 as f64, dims.1 as f64);
    let x0 = (cx - w / 2.0).round().clamp(0.0, iw - 2.0);
    let y0 = (cy - h / 2.0).round().clamp(0.0, ih - 2.0);
    let x1 = (cx + w / 2.0).round().clamp(x0 + 1.0, iw);
    let y1 = (cy + h / 2.0).round().clamp(y0 + 1.0, ih);
    BoundingBox::new(x0, y0, x1, y1).expect("ordered, non-negative coordinates")
}

fn jitter_box<R: Rng + ?Sized>(b: &BoundingBox, amount: f64, dims: (usize, usize), rng: &mut R) -> BoundingBox {
    if amount == 0.0 {
        return *b;
    }
    let [x0, y0, x1, y1] = b.coords().map(|c| c + rng.random_range(-amount..=amount));
    make_box(
        (x0 + x1) / 2.0,
        (y0 + y1) / 2.0,
        (x1 - x0).abs().max(2.0),
        (y1 - y0).abs().max(2.0),
        dims,
    )
}

/// Smooth plateau over `region` with logistic ramps and uniform noise.
pub fn probability_signal<R: Rng + ?Sized>(
    n_slices: usize,
    region: SliceSegment,
    noise: f64,
    rng: &mut R,
) -> Vec<f64> {
    const HIGH: f64 = 0.9;
    const LOW: f64 = 0.03;
    (0..n_slices)
        .map(|s| {
            let inside = if s < region.first {
                -((region.first - s) as f64)
            } else if s > region.last {
                -((s - region.last) as f64)
            } else {
                (s - region.first).min(region.last - s) as f64
            };
            let base = LOW + (HIGH - LOW) / (1.0 + (-(inside + 0.5) * 1.5).exp());
            let eps = if noise > 0.0 {
                rng.random_range(-noise..=noise)
            } else {
                0.0
            };
            (base + eps).clamp(0.0, 1.0)
        })
        .collect()
}

struct Drawn {
    record: ScanRecord,
    layout: ScanLayout,
}

fn draw_scan<R: Rng + ?Sized>(cfg: &SynthConfig, scan_id: String, abnormal: bool, rng: &mut R) -> Drawn {
    let dims = cfg.image_dims;
    let (ih, iw) = (dims.0 as f64, dims.1 as f64);
    let scale = iw / 512.0;
    let normal = Normal::new(cfg.mean_slices, cfg.slice_stddev).expect("validated");
    let n = (normal.sample(rng).round().max(0.0) as usize).max(cfg.min_slices);

    let abnormal_side = abnormal.then(|| {
        let p_left = cfg.left_right_ratio / (1.0 + cfg.left_right_ratio);
        if rng.random_bool(p_left) {
            Side::Left
        } else {
            Side::Right
        }
    });
    let run_len = abnormal_side.map(|_| rng.random_range(cfg.abnormal_run.0..=cfg.abnormal_run.1));

    // annotated span, then the signal region around it
    let base_span = ((n as f64 * cfg.segment_fraction / 3.0).round() as usize).max(5);
    let span_len = run_len.map_or(base_span, |r| base_span.max(r + 4)).min(n);
    let region_len = ((n as f64 * cfg.segment_fraction).round() as usize)
        .max(span_len + 4)
        .min(n);
    let lo = ((n as f64 * 0.2) as usize).min(n - region_len);
    let hi = (((n as f64 * 0.8) as usize).saturating_sub(region_len)).max(lo);
    let region_first = rng.random_range(lo..=hi);
    let extra = region_len - span_len;
    let offset = if extra >= 4 {
        rng.random_range(extra / 4..=extra - extra / 4)
    } else {
        extra / 2
    };
    let span_first = region_first + offset;
    let span = SliceSegment {
        first: span_first,
        last: span_first + span_len - 1,
    };
    let region = SliceSegment {
        first: region_first,
        last: region_first + region_len - 1,
    };

    let centers = [
        (
            iw * 0.62 + rng.random_range(-12.0..=12.0) * scale,
            ih * 0.5 + rng.random_range(-15.0..=15.0) * scale,
        ),
        (
            iw * 0.38 + rng.random_range(-12.0..=12.0) * scale,
            ih * 0.5 + rng.random_range(-15.0..=15.0) * scale,
        ),
    ];
    let normal_box = |side: Side, rng: &mut R| {
        let (cx, cy) = centers[side_index(side)];
        make_box(
            cx,
            cy,
            rng.random_range(22.0..=34.0) * scale,
            rng.random_range(26.0..=40.0) * scale,
            dims,
        )
    };

    let mut labels: BTreeMap<usize, SliceLabel> = BTreeMap::new();
    let mut normal_slices = vec![span.first, span.last];
    if rng.random_bool(0.5) {
        normal_slices.push(rng.random_range(span.first..=span.last));
    }
    for s in normal_slices {
        let entry = labels.entry(s).or_default();
        for side in Side::BOTH {
            if Some(side) != abnormal_side && entry.normal_boxes.iter().all(|(sd, _)| *sd != side) {
                entry.normal_boxes.push((side, normal_box(side, rng)));
            }
        }
    }

    let abnormal_run = run_len.map(|r| {
        let start = span.first + 2 + rng.random_range(0..=span_len - r - 4);
        SliceSegment {
            first: start,
            last: start + r - 1,
        }
    });
    if let (Some(side), Some(run)) = (abnormal_side, abnormal_run) {
        let (cx, cy) = centers[side_index(side)];
        let base = make_box(
            cx,
            cy,
            rng.random_range(34.0..=60.0) * scale,
            rng.random_range(36.0..=64.0) * scale,
            dims,
        );
        for s in run.indices() {
            let b = jitter_box(&base, cfg.box_jitter, dims, rng);
            labels.entry(s).or_default().abnormal_boxes.push((side, b));
        }
    }

    Drawn {
        record: ScanRecord {
            scan_id: scan_id.clone(),
            n_slices: n,
            labels,
            split: Split::Train,
            image_dims: dims,
        },
        layout: ScanLayout {
            scan_id,
            region,
            span,
            abnormal_side,
            abnormal_run,
            centers,
        },
    }
}

/// Simulated detector output over `slices` of one scan. Detection draws
/// for a slice share one latent uniform with probability
/// `slice_correlation`, otherwise each model draws independently.
pub fn simulate_scan_detections<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    scan: &ScanRecord,
    centers: [(f64, f64); 2],
    slices: SliceSegment,
    rng: &mut R,
) -> Vec<DetectionRecord> {
    let k = cfg.num_models();
    let dims = scan.image_dims;
    let scale = dims.1 as f64 / 512.0;
    let mut out = Vec::new();
    let draws = |rng: &mut R| -> Vec<f64> {
        if rng.random_bool(cfg.slice_correlation) {
            vec![rng.random::<f64>(); k]
        } else {
            (0..k).map(|_| rng.random::<f64>()).collect()
        }
    };
    for s in slices.indices().filter(|&s| s < scan.n_slices) {
        let label = scan.labels.get(&s);
        let tp_u = draws(rng);
        let fp_u = draws(rng);
        for m in 0..k {
            let mut push = |side: Side, bbox: BoundingBox, score: f64| {
                out.push(DetectionRecord {
                    scan_id: scan.scan_id.clone(),
                    slice_index: s,
                    model_id: m,
                    side,
                    bbox,
                    score,
                })
            };
            if let Some(label) = label {
                for &(side, b) in &label.abnormal_boxes {
                    if tp_u[m] < cfg.sensitivity[m] {
                        let bbox = jitter_box(&b, cfg.box_jitter, dims, rng);
                        push(side, bbox, cfg.tp_score.sample(rng));
                    }
                }
            }
            if fp_u[m] < cfg.fp_rate[m] {
                let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
                let (cx, cy) = centers[side_index(side)];
                let bbox = make_box(
                    cx + rng.random_range(-40.0..=40.0) * scale,
                    cy + rng.random_range(-40.0..=40.0) * scale,
                    rng.random_range(12.0..=50.0) * scale,
                    rng.random_range(12.0..=50.0) * scale,
                    dims,
                );
                push(side, bbox, cfg.fp_score.sample(rng));
            }
        }
    }
    out
}

/// Gland centers `[left, right]` for a scan without a generated layout: the
/// mean center of its labeled boxes per side, else the generator's default
/// position.
pub fn gland_centers(scan: &ScanRecord) -> [(f64, f64); 2] {
    let (ih, iw) = (scan.image_dims.0 as f64, scan.image_dims.1 as f64);
    let mut centers = [(iw * 0.62, ih * 0.5), (iw * 0.38, ih * 0.5)];
    for side in Side::BOTH {
        let boxes: Vec<&BoundingBox> = scan
            .labels
            .values()
            .flat_map(|l| l.normal_boxes.iter().chain(&l.abnormal_boxes))
            .filter(|(s, _)| *s == side)
            .map(|(_, b)| b)
            .collect();
        if !boxes.is_empty() {
            let n = boxes.len() as f64;
            centers[side_index(side)] = (
                boxes.iter().map(|b| (b.x_tl + b.x_br) / 2.0).sum::<f64>() / n,
                boxes.iter().map(|b| (b.y_tl + b.y_br) / 2.0).sum::<f64>() / n,
            );
        }
    }
    centers
}

/// Simulated detections over every slice of every scan of an existing
/// dataset, using `cfg`'s detector model and seed.
pub fn simulate_detections(cfg: &SynthConfig, dataset: &Dataset) -> Result<Vec<DetectionRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (i, scan) in dataset.scans.iter().enumerate() {
        let all = SliceSegment::new(0, scan.n_slices - 1)?;
        out.extend(simulate_scan_detections(
            cfg,
            scan,
            gland_centers(scan),
            all,
            &mut detection_rng(cfg.seed, i),
        ));
    }
    Ok(out)
}

/// Per-scan generator for detection draws, independent of scan order.
pub fn detection_rng(seed: u64, scan_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_DETECTIONS + scan_index as u64);
    rng
}

fn scan_rng(seed: u64, scan_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + scan_index as u64);
    rng
}

/// Build a full dataset. Abnormality is drawn per scan from `prevalence`;
/// the split then takes `test_fraction` of each class, so both classes
/// appear in both splits whenever a class has at least two scans.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let width = (cfg.n_scans - 1).to_string().len().max(4);
    let mut top = ChaCha8Rng::seed_from_u64(cfg.seed);
    let abnormal: Vec<bool> = (0..cfg.n_scans)
        .map(|_| top.random_bool(cfg.prevalence))
        .collect();

    let mut drawn: Vec<Drawn> = (0..cfg.n_scans)
        .map(|i| draw_scan(cfg, format!("scan{i:0width$}"), abnormal[i], &mut scan_rng(cfg.seed, i)))
        .collect();

    for class in [true, false] {
        let mut idx: Vec<usize> = (0..cfg.n_scans).filter(|&i| abnormal[i] == class).collect();
        idx.shuffle(&mut top);
        let n_test = if idx.len() >= 2 {
            ((idx.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, idx.len() - 1)
        } else {
            0
        };
        for &i in &idx[..n_test] {
            drawn[i].record.split = Split::Test;
        }
    }

    let mut probabilities = Vec::with_capacity(cfg.n_scans);
    let mut detections = Vec::new();
    for (i, d) in drawn.iter().enumerate() {
        let mut rng = scan_rng(cfg.seed, i);
        // skip past the draws already used for the layout
        rng.set_word_pos(1u128 << 40);
        probabilities.push(ProbabilitySignal {
            scan_id: d.record.scan_id.clone(),
            probs: probability_signal(d.record.n_slices, d.layout.region, cfg.prob_noise, &mut rng),
        });
        detections.extend(simulate_scan_detections(
            cfg,
            &d.record,
            d.layout.centers,
            d.layout.region,
            &mut detection_rng(cfg.seed, i),
        ));
    }

    let (scans, layouts) = drawn.into_iter().map(|d| (d.record, d.layout)).unzip();
    let dataset = Dataset {
        scans,
        detections: Some(detections),
        probabilities: Some(probabilities),
    };
    dataset.validate()?;
    Ok(SynthDataset { dataset, layouts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSliceRates {
    pub model_id: usize,
    pub tp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
    pub sensitivity: f64,
    pub fp_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub scans: usize,
    pub abnormal: usize,
    pub prevalence: f64,
    pub mean_slices: f64,
    /// Mean over scans of region length / slice count.
    pub segment_fraction: f64,
    pub left_abnormal: usize,
    pub right_abnormal: usize,
    pub mean_abnormal_run: f64,
    /// Slice-level detection rates; positives are abnormal-labeled slices,
    /// negatives every other simulated slice.
    pub per_model: Vec<ModelSliceRates>,
}

pub fn calibration_report(data: &SynthDataset, num_models: usize) -> CalibrationReport {
    let scans = &data.dataset.scans;
    let n = scans.len().max(1) as f64;
    let abnormal = scans.iter().filter(|s| s.is_abnormal()).count();
    let mut fired: BTreeMap<(&str, usize), Vec<bool>> = BTreeMap::new();
    for d in data.dataset.detections.iter().flatten() {
        let row = fired
            .entry((d.scan_id.as_str(), d.slice_index))
            .or_insert_with(|| vec![false; num_models]);
        if d.model_id < num_models {
            row[d.model_id] = true;
        }
    }
    let mut per_model: Vec<ModelSliceRates> = (0..num_models)
        .map(|m| ModelSliceRates {
            model_id: m,
            tp: 0,
            fn_: 0,
            tn: 0,
            fp: 0,
            sensitivity: 0.0,
            fp_rate: 0.0,
        })
        .collect();
    for (scan, layout) in scans.iter().zip(&data.layouts) {
        for s in layout.region.indices() {
            let positive = scan.labels.get(&s).is_some_and(SliceLabel::has_abnormal);
            let row = fired.get(&(scan.scan_id.as_str(), s));
            for (m, r) in per_model.iter_mut().enumerate() {
                let hit = row.is_some_and(|r| r[m]);
                match (positive, hit) {
                    (true, true) => r.tp += 1,
                    (true, false) => r.fn_ += 1,
                    (false, true) => r.fp += 1,
                    (false, false) => r.tn += 1,
                }
            }
        }
    }
    for r in &mut per_model {
        r.sensitivity = if r.tp + r.fn_ == 0 { 0.0 } else { r.tp as f64 / (r.tp + r.fn_) as f64 };
        r.fp_rate = if r.fp + r.tn == 0 { 0.0 } else { r.fp as f64 / (r.fp + r.tn) as f64 };
    }
    let runs: Vec<usize> = data.layouts.iter().filter_map(|l| l.abnormal_run.map(|r| r.len())).collect();
    CalibrationReport {
        scans: scans.len(),
        abnormal,
        prevalence: abnormal as f64 / n,
        mean_slices: scans.iter().map(|s| s.n_slices as f64).sum::<f64>() / n,
        segment_fraction: scans
            .iter()
            .zip(&data.layouts)
            .map(|(s, l)| l.region.len() as f64 / s.n_slices as f64)
            .sum::<f64>()
            / n,
        left_abnormal: data.layouts.iter().filter(|l| l.abnormal_side == Some(Side::Left)).count(),
        right_abnormal: data.layouts.iter().filter(|l| l.abnormal_side == Some(Side::Right)).count(),
        mean_abnormal_run: if runs.is_empty() {
            0.0
        } else {
            runs.iter().sum::<usize>() as f64 / runs.len() as f64
        },
        per_model,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::soi::{extract_segment, ground_truth_segment, segment_overhangs, DEFAULT_THRESHOLD, DEFAULT_WINDOW};

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n_scans: n,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_prevalence_gives_no_abnormal_scans() {
        let data = generate(&SynthConfig {
            prevalence: 0.0,
            ..small(50)
        })
        .unwrap();
        assert!(data.dataset.scans.iter().all(|s| !s.is_abnormal()));
        assert!(data.layouts.iter().all(|l| l.abnormal_run.is_none()));
    }

    #[test]
    fn oracle_detects_every_abnormal_slice_exactly() {
        let cfg = SynthConfig {
            prevalence: 0.5,
            ..SynthConfig { n_scans: 40, ..SynthConfig::oracle() }
        };
        let data = generate(&cfg).unwrap();
        let dets = data.dataset.detections.as_ref().unwrap();
        let mut expected = 0;
        for scan in &data.dataset.scans {
            for (&s, label) in &scan.labels {
                for &(side, b) in &label.abnormal_boxes {
                    expected += cfg.num_models();
                    for m in 0..cfg.num_models() {
                        let d = dets
                            .iter()
                            .find(|d| d.scan_id == scan.scan_id && d.slice_index == s && d.model_id == m && d.side == side)
                            .expect("oracle detection");
                        assert_eq!(d.bbox, b);
                        assert_eq!(d.score, 1.0);
                    }
                }
            }
        }
        assert_eq!(dets.len(), expected);
        let report = calibration_report(&data, cfg.num_models());
        for r in &report.per_model {
            assert_eq!(r.sensitivity, 1.0);
            assert_eq!(r.fp_rate, 0.0);
        }
    }

    #[test]
    fn no_detectors_firing_gives_zero_numerators() {
        let cfg = SynthConfig {
            sensitivity: vec![0.0; 3],
            fp_rate: vec![0.0; 3],
            prevalence: 0.3,
            ..small(30)
        };
        let data = generate(&cfg).unwrap();
        assert!(data.dataset.detections.as_ref().unwrap().is_empty());
        let report = calibration_report(&data, 3);
        assert!(report.per_model.iter().all(|r| r.tp == 0 && r.fp == 0));
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&small(30)).unwrap();
        let b = generate(&small(30)).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 1, ..small(30) }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn abnormal_labels_form_one_run_inside_span() {
        let data = generate(&SynthConfig {
            prevalence: 0.6,
            left_right_ratio: 1.0,
            ..small(60)
        })
        .unwrap();
        for (scan, layout) in data.dataset.scans.iter().zip(&data.layouts) {
            let abnormal: Vec<usize> = scan
                .labels
                .iter()
                .filter(|(_, l)| l.has_abnormal())
                .map(|(&i, _)| i)
                .collect();
            assert_eq!(abnormal.is_empty(), layout.abnormal_side.is_none());
            if let Some(run) = layout.abnormal_run {
                assert_eq!(abnormal, run.indices().collect::<Vec<_>>());
                assert!(run.first >= layout.span.first + 2 && run.last + 2 <= layout.span.last);
                assert!(run.len() >= 3);
            }
            let (first, last) = scan.annotated_span().unwrap();
            assert_eq!((first, last), (layout.span.first, layout.span.last));
            assert!(layout.region.first <= first && last <= layout.region.last);
            scan.validate().unwrap();
        }
    }

    #[test]
    fn signal_covers_annotated_span() {
        let data = generate(&small(300)).unwrap();
        let mut covered = 0;
        for (scan, p) in data.dataset.scans.iter().zip(data.dataset.probabilities.as_ref().unwrap()) {
            let pred = extract_segment(&p.probs, DEFAULT_THRESHOLD, DEFAULT_WINDOW).unwrap().unwrap();
            let truth = ground_truth_segment(scan, 0).unwrap();
            let (l, r) = segment_overhangs(pred, truth, scan.n_slices);
            if l >= 0.0 && r >= 0.0 {
                covered += 1;
            }
        }
        assert!(covered as f64 >= 0.95 * 300.0, "{covered}/300");
    }

    #[test]
    fn calibration_matches_configuration() {
        let data = generate(&SynthConfig {
            prevalence: 0.3,
            ..small(400)
        })
        .unwrap();
        let report = calibration_report(&data, 5);
        assert!((report.mean_slices - 255.0).abs() < 8.0);
        assert!((report.segment_fraction - 0.2).abs() < 0.02);
        for (r, (&sens, &fp)) in report.per_model.iter().zip(DEFAULT_SENSITIVITY.iter().zip(&DEFAULT_FP_RATE)) {
            assert!((r.sensitivity - sens).abs() < 0.05, "{r:?}");
            assert!((r.fp_rate - fp).abs() < 0.01, "{r:?}");
        }
        assert!(report.right_abnormal > report.left_abnormal);
    }

    #[test]
    fn both_classes_in_both_splits() {
        let data = generate(&SynthConfig {
            prevalence: 0.1,
            ..small(100)
        })
        .unwrap();
        let rep = data.dataset.split_report();
        assert!(rep.train_abnormal > 0 && rep.test_abnormal > 0);
        assert!(rep.train > rep.train_abnormal && rep.test > rep.test_abnormal);
        assert!((rep.test as f64 / 100.0 - 0.3).abs() < 0.02);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate(&small(1)).is_err());
        assert!(generate(&SynthConfig { prevalence: 1.5, ..small(10) }).is_err());
        assert!(generate(&SynthConfig { fp_rate: vec![0.1], ..small(10) }).is_err());
        assert!(generate(&SynthConfig { abnormal_run: (2, 5), ..small(10) }).is_err());
    }
}
