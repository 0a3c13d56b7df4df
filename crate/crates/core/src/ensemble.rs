//! Multi-detector ensemble: per-slice flags, union/intersection aggregation
//! and naive scan-level classification.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::soi::SliceSegment;
use crate::types::{DetectionRecord, ScanRecord, Side};

pub const DEFAULT_NUM_MODELS: usize = 5;

/// Detections of `k` models for one scan, restricted to its slices of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub scan_id: String,
    pub k: usize,
    pub segment: SliceSegment,
    pub detections: Vec<DetectionRecord>,
}

impl EnsembleOutput {
    /// Keep detections of this scan that fall inside `segment`, at most one per
    /// (slice, model, side): the highest score wins, earlier input on ties.
    /// Output is sorted by (slice, model, side).
    pub fn new<'a>(
        scan_id: &str,
        k: usize,
        segment: SliceSegment,
        detections: impl IntoIterator<Item = &'a DetectionRecord>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("ensemble needs at least one model".into()));
        }
        let mut best: BTreeMap<(usize, usize, Side), &DetectionRecord> = BTreeMap::new();
        for d in detections {
            if d.scan_id != scan_id || !segment.contains(d.slice_index) {
                continue;
            }
            if d.model_id >= k {
                return Err(Error::validation(
                    format!("detection {}/slice {}", d.scan_id, d.slice_index),
                    format!("model_id {} not below k = {k}", d.model_id),
                ));
            }
            best.entry((d.slice_index, d.model_id, d.side))
                .and_modify(|cur| {
                    if d.score > cur.score {
                        *cur = d;
                    }
                })
                .or_insert(d);
        }
        Ok(EnsembleOutput {
            scan_id: scan_id.to_owned(),
            k,
            segment,
            detections: best.into_values().cloned().collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for d in &self.detections {
            if d.model_id >= self.k || !self.segment.contains(d.slice_index) {
                return Err(Error::validation(
                    format!("ensemble output {}", self.scan_id),
                    format!(
                        "detection at slice {} model {} outside segment/model range",
                        d.slice_index, d.model_id
                    ),
                ));
            }
            if !seen.insert((d.slice_index, d.model_id, d.side)) {
                return Err(Error::validation(
                    format!("ensemble output {}", self.scan_id),
                    format!(
                        "duplicate detection at slice {} model {} side {}",
                        d.slice_index, d.model_id, d.side
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn detection(&self, slice: usize, model: usize, side: Side) -> Option<&DetectionRecord> {
        self.detections
            .iter()
            .find(|d| d.slice_index == slice && d.model_id == model && d.side == side)
    }
}

/// Slice-by-model detection flags over a segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceFlags {
    pub first_slice: usize,
    pub rows: Vec<Vec<bool>>,
}

impl SliceFlags {
    pub fn get(&self, slice: usize, model: usize) -> bool {
        slice
            .checked_sub(self.first_slice)
            .and_then(|r| self.rows.get(r))
            .is_some_and(|row| row[model])
    }

    pub fn row(&self, slice: usize) -> Option<&[bool]> {
        slice
            .checked_sub(self.first_slice)
            .and_then(|r| self.rows.get(r))
            .map(Vec::as_slice)
    }
}

/// `flag[i][j]` is set when model `j` emitted any detection (either side) on
/// slice `i`.
pub fn slice_flags(out: &EnsembleOutput) -> SliceFlags {
    let mut rows = vec![vec![false; out.k]; out.segment.len()];
    for d in &out.detections {
        rows[d.slice_index - out.segment.first][d.model_id] = true;
    }
    SliceFlags {
        first_slice: out.segment.first,
        rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Union,
    Intersection,
}

pub fn aggregate_slice(row: &[bool], mode: Aggregate) -> bool {
    match mode {
        Aggregate::Union => row.iter().any(|&f| f),
        Aggregate::Intersection => !row.is_empty() && row.iter().all(|&f| f),
    }
}

/// Scan is positive for `model_id` iff that model fired on any slice.
pub fn naive_scan_classify(out: &EnsembleOutput, model_id: usize) -> Result<bool> {
    if model_id >= out.k {
        return Err(Error::InvalidArgument(format!(
            "model_id {model_id} not below k = {}",
            out.k
        )));
    }
    Ok(out.detections.iter().any(|d| d.model_id == model_id))
}

/// Naive per-model votes for one scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanVotes {
    pub scan_id: String,
    pub abnormal: bool,
    pub votes: Vec<bool>,
}

impl ScanVotes {
    pub fn from_output(out: &EnsembleOutput, abnormal: bool) -> Self {
        let votes = (0..out.k)
            .map(|j| out.detections.iter().any(|d| d.model_id == j))
            .collect();
        ScanVotes {
            scan_id: out.scan_id.clone(),
            abnormal,
            votes,
        }
    }
}

/// Scan ids falling in each confusion cell.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanSets {
    pub tp: BTreeSet<String>,
    #[serde(rename = "fn")]
    pub fn_: BTreeSet<String>,
    pub tn: BTreeSet<String>,
    pub fp: BTreeSet<String>,
}

impl ScanSets {
    pub fn matrix(&self) -> ConfusionMatrix {
        ConfusionMatrix::new(
            self.tp.len() as u64,
            self.fn_.len() as u64,
            self.tn.len() as u64,
            self.fp.len() as u64,
        )
    }

    fn insert(&mut self, id: &str, predicted: bool, actual: bool) {
        let cell = match (predicted, actual) {
            (true, true) => &mut self.tp,
            (false, true) => &mut self.fn_,
            (false, false) => &mut self.tn,
            (true, false) => &mut self.fp,
        };
        cell.insert(id.to_owned());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetAggregates {
    pub per_model: Vec<ScanSets>,
    /// Positive only when every model is positive.
    pub intersection: ScanSets,
    /// Positive when any model is positive.
    pub union: ScanSets,
}

impl SetAggregates {
    pub fn aggregate(&self, mode: Aggregate) -> &ScanSets {
        match mode {
            Aggregate::Union => &self.union,
            Aggregate::Intersection => &self.intersection,
        }
    }
}

/// Per-model naive confusion sets plus the ∩ / ∪ aggregates.
pub fn scan_set_aggregates(scans: &[ScanVotes]) -> Result<SetAggregates> {
    let k = scans.first().map_or(0, |s| s.votes.len());
    if scans.iter().any(|s| s.votes.len() != k) {
        return Err(Error::InvalidInput(
            "every scan must carry one vote per model".into(),
        ));
    }
    let mut agg = SetAggregates {
        per_model: vec![ScanSets::default(); k],
        intersection: ScanSets::default(),
        union: ScanSets::default(),
    };
    for s in scans {
        for (j, &v) in s.votes.iter().enumerate() {
            agg.per_model[j].insert(&s.scan_id, v, s.abnormal);
        }
        let all = k > 0 && s.votes.iter().all(|&v| v);
        let any = s.votes.iter().any(|&v| v);
        agg.intersection.insert(&s.scan_id, all, s.abnormal);
        agg.union.insert(&s.scan_id, any, s.abnormal);
    }
    Ok(agg)
}

/// Slice-level confusion per model, plus union and intersection, over the
/// annotated slices inside the segment. Positives are slices with an
/// abnormal box; negatives are slices with only normal boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceConfusion {
    pub per_model: Vec<ConfusionMatrix>,
    pub union: ConfusionMatrix,
    pub intersection: ConfusionMatrix,
}

impl SliceConfusion {
    pub fn empty(k: usize) -> Self {
        SliceConfusion {
            per_model: vec![ConfusionMatrix::default(); k],
            union: ConfusionMatrix::default(),
            intersection: ConfusionMatrix::default(),
        }
    }

    pub fn accumulate(&mut self, scan: &ScanRecord, out: &EnsembleOutput) {
        let flags = slice_flags(out);
        for (&idx, label) in scan.labels.range(out.segment.first..=out.segment.last) {
            if label.is_empty() {
                continue;
            }
            let actual = label.has_abnormal();
            let row = flags.row(idx).expect("slice inside segment");
            for (j, cm) in self.per_model.iter_mut().enumerate() {
                cm.record(row[j], actual);
            }
            self.union
                .record(aggregate_slice(row, Aggregate::Union), actual);
            self.intersection
                .record(aggregate_slice(row, Aggregate::Intersection), actual);
        }
    }
}
