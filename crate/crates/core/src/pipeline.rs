//! Stage-by-stage pipeline over a run directory. Every stage reads its inputs
//! from the artifacts of earlier stages, so a run can be resumed from any
//! stage once those artifacts exist.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    load_model, predict_all, save_model, train, ClassifierModel, EpochStats,
};
use crate::config::{FeatureScaling, PipelineConfig};
use crate::dataset::{
    load_dataset, read_json, read_jsonl, save_dataset, write_json, write_jsonl, Dataset,
    SplitReport, MANIFEST_FILE,
};
use crate::ensemble::{
    scan_set_aggregates, slice_flags, EnsembleOutput, ScanVotes, SliceConfusion,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, FeatureScale, ScanGraph};
use crate::localize::{localize_with, Localization};
use crate::metrics::{
    deserialize_threshold, iou_2d_with, longest_majority_run, majority_vote_baseline,
    pick_operating_point, roc_curve, serialize_threshold, ConfusionMatrix, OperatingMode, Ratio,
    RocCurve,
};
use crate::report;
use crate::soi::{
    extract_segment, ground_truth_segment, segment_iou_1d, segment_overhangs, SliceSegment,
};
use crate::synth::{calibration_report, generate, simulate_detections};
use crate::types::{DetectionRecord, ScanRecord, Side, Split};

pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Dataset,
    Soi,
    Ensemble,
    Graphs,
    Train,
    Classify,
    Threshold,
    Localize,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Dataset,
        Stage::Soi,
        Stage::Ensemble,
        Stage::Graphs,
        Stage::Train,
        Stage::Classify,
        Stage::Threshold,
        Stage::Localize,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Dataset => "dataset",
            Stage::Soi => "soi",
            Stage::Ensemble => "ensemble",
            Stage::Graphs => "graphs",
            Stage::Train => "train",
            Stage::Classify => "classify",
            Stage::Threshold => "threshold",
            Stage::Localize => "localize",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// The file whose presence marks the stage as complete.
    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Dataset => MANIFEST_FILE,
            Stage::Soi => "segments.jsonl",
            Stage::Ensemble => "outputs.jsonl",
            Stage::Graphs => "graphs.jsonl",
            Stage::Train => "model.json",
            Stage::Classify => "scores.jsonl",
            Stage::Threshold => "operating_points.json",
            Stage::Localize => "localizations.jsonl",
            Stage::Evaluate => "evaluation.json",
            Stage::Report => "report.txt",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Stage::ALL.iter().map(|s| s.name()).collect();
                Error::InvalidArgument(format!("unknown stage {s:?}, expected one of {}", names.join(", ")))
            })
    }
}

/// Segment found for one scan, with its agreement with the annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoiRecord {
    pub scan_id: String,
    pub n_slices: usize,
    pub segment: Option<SliceSegment>,
    /// Annotated span plus the configured padding.
    pub actual: Option<SliceSegment>,
    pub iou: Option<f64>,
    pub left_delta: Option<f64>,
    pub right_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoiSummary {
    pub scans: usize,
    pub with_segment: usize,
    /// Scans whose smoothed signal never exceeds the threshold. They get no
    /// graph and a classifier score of 0.
    pub no_segment: Vec<String>,
    /// Scans with both a segment and annotations.
    pub evaluated: usize,
    /// Evaluated scans whose segment covers the annotated span.
    pub covering: usize,
    pub mean_iou: Option<f64>,
    pub mean_left_delta: Option<f64>,
    pub mean_right_delta: Option<f64>,
    /// Mean segment length over scan length, for scans with a segment.
    pub mean_segment_fraction: Option<f64>,
}

/// Confusion counts with the derived ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub confusion: ConfusionMatrix,
    pub ppv: Ratio,
    pub npv: Ratio,
    pub recall: Ratio,
    pub f1: Ratio,
}

impl MetricRow {
    pub fn new(name: impl Into<String>, confusion: ConfusionMatrix) -> Self {
        MetricRow {
            name: name.into(),
            confusion,
            ppv: confusion.precision(),
            npv: confusion.npv(),
            recall: confusion.recall(),
            f1: confusion.f1(),
        }
    }
}

/// Naive scan-level and slice-level detector tables on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTables {
    pub scans: usize,
    pub scan_level: Vec<MetricRow>,
    pub slice_level: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub pretrained: bool,
    pub train_graphs: usize,
    pub positives: usize,
    pub trace: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub scan_id: String,
    pub split: Split,
    pub abnormal: bool,
    pub probability: f64,
    /// No slices of interest were found, so no graph was scored.
    pub no_segment: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    Picked,
    Preset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub name: String,
    pub source: PointSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<OperatingMode>,
    /// Scans scoring at or above this are flagged abnormal; `null` flags none.
    #[serde(
        serialize_with = "serialize_threshold",
        deserialize_with = "deserialize_threshold"
    )]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// The test split lacks one class, so no point could be picked.
    pub single_class: bool,
    pub points: Vec<ThresholdEntry>,
    pub skipped: Vec<SkippedPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEvaluation {
    #[serde(
        serialize_with = "serialize_threshold",
        deserialize_with = "deserialize_threshold"
    )]
    pub threshold: f64,
    pub source: PointSource,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEvaluation {
    pub single_class: bool,
    pub auc: Option<f64>,
    pub roc: Option<RocCurve>,
    pub points: Vec<PointEvaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEvaluation {
    /// AUC of the longest majority run used as a score.
    pub auc: Option<f64>,
    /// One row per minimum run length, starting at 0.
    pub sweep: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideStats {
    pub count: usize,
    pub mean_iou: Option<f64>,
    pub mean_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationColumn {
    pub name: String,
    /// The column over every abnormal test scan uses 0.
    #[serde(
        serialize_with = "serialize_threshold",
        deserialize_with = "deserialize_threshold"
    )]
    pub threshold: f64,
    /// Abnormal test scans flagged at this threshold.
    pub eval_base: usize,
    pub left: SideStats,
    pub right: SideStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: SplitReport,
    pub soi: SoiSummary,
    pub ensemble: EnsembleTables,
    pub classifier: ClassifierEvaluation,
    pub baseline: BaselineEvaluation,
    pub localization: Vec<LocalizationColumn>,
}

/// A run directory bound to its configuration.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub config: PipelineConfig,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Run {
            dir: dir.into(),
            config,
        })
    }

    /// Open an existing run with its configuration snapshot.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let config = PipelineConfig::load(&dir.join(CONFIG_SNAPSHOT))?;
        Ok(Run { dir, config })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.name())
    }

    pub fn artifact(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join(stage.artifact())
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.artifact(stage).is_file()
    }

    /// Stages up to and including `upto` whose artifact is absent.
    pub fn missing_stages(&self, upto: Stage) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|&s| s <= upto && !self.is_complete(s))
            .collect()
    }

    fn require(&self, current: Stage, upstream: Stage) -> Result<PathBuf> {
        let path = self.artifact(upstream);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::stage(
                current.name(),
                format!(
                    "missing upstream artifact {} (run the `{}` stage first)",
                    path.display(),
                    upstream
                ),
            ))
        }
    }

    pub fn write_config_snapshot(&self) -> Result<()> {
        create_dir(&self.dir)?;
        let path = self.dir.join(CONFIG_SNAPSHOT);
        fs::write(&path, self.config.to_toml()?).map_err(|e| Error::io(&path, e))
    }

    /// Run `from` and every later stage.
    pub fn run_from(&self, from: Stage) -> Result<()> {
        self.write_config_snapshot()?;
        for stage in Stage::ALL.into_iter().filter(|&s| s >= from) {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    pub fn run_all(&self) -> Result<()> {
        self.run_from(Stage::Dataset)
    }

    /// Run one stage. Errors name the stage that failed.
    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        create_dir(&self.stage_dir(stage))?;
        let result = match stage {
            Stage::Dataset => self.stage_dataset(),
            Stage::Soi => self.stage_soi(),
            Stage::Ensemble => self.stage_ensemble(),
            Stage::Graphs => self.stage_graphs(),
            Stage::Train => self.stage_train(),
            Stage::Classify => self.stage_classify(),
            Stage::Threshold => self.stage_threshold(),
            Stage::Localize => self.stage_localize(),
            Stage::Evaluate => self.stage_evaluate(),
            Stage::Report => self.stage_report(),
        };
        result.map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::stage(stage.name(), other),
        })
    }

    pub fn dataset(&self, current: Stage) -> Result<Dataset> {
        load_dataset(&self.require(current, Stage::Dataset)?)
    }

    fn stage_dataset(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::Dataset);
        let ds = match &self.config.dataset.manifest {
            Some(manifest) => load_dataset(manifest)?,
            None => {
                let synth = generate(&self.config.synth)?;
                write_json(
                    &dir.join("calibration.json"),
                    &calibration_report(&synth, self.config.ensemble.num_models),
                )?;
                synth.dataset
            }
        };
        save_dataset(&dir, &ds)?;
        write_json(&dir.join("summary.json"), &ds.split_report())
    }

    /// Replace the dataset's detections with `detections` and rebuild the
    /// ensemble stage.
    pub fn ingest_detections(&self, detections: Vec<DetectionRecord>) -> Result<()> {
        let mut ds = self.dataset(Stage::Ensemble)?;
        let k = self.config.ensemble.num_models;
        for d in &detections {
            let scan = ds.scan(&d.scan_id).ok_or_else(|| {
                Error::validation(format!("detection for scan {}", d.scan_id), "scan not in manifest")
            })?;
            d.validate(scan.n_slices, Some(k))?;
        }
        ds.detections = Some(detections);
        save_dataset(&self.stage_dir(Stage::Dataset), &ds)?;
        self.run_stage(Stage::Ensemble)
    }

    /// Replace the dataset's detections with simulated ones drawn from the
    /// `synth` detector model, then rebuild the ensemble stage.
    pub fn simulate_detections(&self) -> Result<()> {
        let ds = self.dataset(Stage::Ensemble)?;
        let dets = simulate_detections(&self.config.synth, &ds)?;
        self.ingest_detections(dets)
    }

    fn stage_soi(&self) -> Result<()> {
        let ds = self.dataset(Stage::Soi)?;
        let signals = ds.probabilities.as_ref().ok_or_else(|| {
            Error::stage("soi", "dataset has no probability signals attached")
        })?;
        let by_id: BTreeMap<&str, &[f64]> = signals
            .iter()
            .map(|p| (p.scan_id.as_str(), p.probs.as_slice()))
            .collect();
        let cfg = &self.config.soi;
        let records = ds
            .scans
            .par_iter()
            .map(|scan| -> Result<SoiRecord> {
                let probs = by_id.get(scan.scan_id.as_str()).ok_or_else(|| {
                    Error::validation(format!("scan {}", scan.scan_id), "no probability signal")
                })?;
                let segment = extract_segment(probs, cfg.threshold, cfg.window)?;
                let actual = ground_truth_segment(scan, cfg.gt_segment_pad);
                let pair = segment.zip(actual);
                let over = pair.map(|(p, a)| segment_overhangs(p, a, scan.n_slices));
                Ok(SoiRecord {
                    scan_id: scan.scan_id.clone(),
                    n_slices: scan.n_slices,
                    segment,
                    actual,
                    iou: pair.map(|(p, a)| segment_iou_1d(p, a)),
                    left_delta: over.map(|o| o.0),
                    right_delta: over.map(|o| o.1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dir = self.stage_dir(Stage::Soi);
        write_jsonl(&dir.join(Stage::Soi.artifact()), &records)?;
        write_json(&dir.join("summary.json"), &soi_summary(&records))
    }

    fn segments(&self, current: Stage) -> Result<Vec<SoiRecord>> {
        read_jsonl(&self.require(current, Stage::Soi)?)
    }

    fn stage_ensemble(&self) -> Result<()> {
        let ds = self.dataset(Stage::Ensemble)?;
        let dets = ds.detections.as_ref().ok_or_else(|| {
            Error::stage(
                "ensemble",
                "dataset has no detections (use ingest-detections or simulate-detections)",
            )
        })?;
        let segments = self.segments(Stage::Ensemble)?;
        let k = self.config.ensemble.num_models;
        let mut per_scan: BTreeMap<&str, Vec<&DetectionRecord>> = BTreeMap::new();
        for d in dets {
            per_scan.entry(d.scan_id.as_str()).or_default().push(d);
        }
        let outputs = segments
            .par_iter()
            .filter_map(|r| r.segment.map(|seg| (r, seg)))
            .map(|(r, seg)| {
                let dets = per_scan.get(r.scan_id.as_str()).map_or(&[][..], Vec::as_slice);
                EnsembleOutput::new(&r.scan_id, k, seg, dets.iter().copied())
            })
            .collect::<Result<Vec<_>>>()?;
        let dir = self.stage_dir(Stage::Ensemble);
        write_jsonl(&dir.join(Stage::Ensemble.artifact()), &outputs)?;
        let tables = self.ensemble_tables(&ds, &outputs)?;
        write_json(&dir.join("confusion.json"), &tables)?;
        let text = report::ensemble_text(&tables);
        let path = dir.join("confusion.txt");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn ensemble_tables(&self, ds: &Dataset, outputs: &[EnsembleOutput]) -> Result<EnsembleTables> {
        let k = self.config.ensemble.num_models;
        let by_id: BTreeMap<&str, &EnsembleOutput> =
            outputs.iter().map(|o| (o.scan_id.as_str(), o)).collect();
        let test: Vec<&ScanRecord> = ds.scans.iter().filter(|s| s.split == Split::Test).collect();
        let votes: Vec<ScanVotes> = test
            .iter()
            .map(|s| match by_id.get(s.scan_id.as_str()) {
                Some(out) => ScanVotes::from_output(out, s.is_abnormal()),
                None => ScanVotes {
                    scan_id: s.scan_id.clone(),
                    abnormal: s.is_abnormal(),
                    votes: vec![false; k],
                },
            })
            .collect();
        let agg = scan_set_aggregates(&votes)?;
        let mut slices = SliceConfusion::empty(k);
        for s in &test {
            if let Some(out) = by_id.get(s.scan_id.as_str()) {
                slices.accumulate(s, out);
            }
        }
        let modes = self.config.ensemble.aggregate.modes();
        let mut scan_level: Vec<MetricRow> = agg
            .per_model
            .iter()
            .enumerate()
            .map(|(j, sets)| MetricRow::new(format!("model {}", j + 1), sets.matrix()))
            .collect();
        let mut slice_level: Vec<MetricRow> = slices
            .per_model
            .iter()
            .enumerate()
            .map(|(j, cm)| MetricRow::new(format!("model {}", j + 1), *cm))
            .collect();
        for mode in modes {
            let name = match mode {
                crate::ensemble::Aggregate::Union => "union",
                crate::ensemble::Aggregate::Intersection => "intersection",
            };
            scan_level.push(MetricRow::new(name, agg.aggregate(mode).matrix()));
            let cm = match mode {
                crate::ensemble::Aggregate::Union => slices.union,
                crate::ensemble::Aggregate::Intersection => slices.intersection,
            };
            slice_level.push(MetricRow::new(name, cm));
        }
        Ok(EnsembleTables {
            scans: test.len(),
            scan_level,
            slice_level,
        })
    }

    fn outputs(&self, current: Stage) -> Result<Vec<EnsembleOutput>> {
        let outputs: Vec<EnsembleOutput> = read_jsonl(&self.require(current, Stage::Ensemble)?)?;
        for o in &outputs {
            o.validate()?;
        }
        Ok(outputs)
    }

    fn stage_graphs(&self) -> Result<()> {
        let ds = self.dataset(Stage::Graphs)?;
        let outputs = self.outputs(Stage::Graphs)?;
        let k = self.config.ensemble.num_models;
        let scaling = self.config.graph.feature_scale;
        let graphs = outputs
            .par_iter()
            .map(|out| -> Result<ScanGraph> {
                let scan = ds.scan(&out.scan_id).ok_or_else(|| {
                    Error::validation(format!("ensemble output {}", out.scan_id), "scan not in manifest")
                })?;
                let scale = match scaling {
                    FeatureScaling::Image => FeatureScale::ByImage {
                        height: scan.image_dims.0,
                        width: scan.image_dims.1,
                    },
                    FeatureScaling::Raw => FeatureScale::Raw,
                };
                let mut g = build_graph(out, out.segment, k, scale)?;
                g.label = Some(scan.is_abnormal());
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;
        write_jsonl(&self.artifact(Stage::Graphs), &graphs)
    }

    fn graphs(&self, current: Stage) -> Result<Vec<ScanGraph>> {
        let graphs: Vec<ScanGraph> = read_jsonl(&self.require(current, Stage::Graphs)?)?;
        for g in &graphs {
            g.validate()?;
        }
        Ok(graphs)
    }

    fn stage_train(&self) -> Result<()> {
        let ds = self.dataset(Stage::Train)?;
        let graphs = self.graphs(Stage::Train)?;
        let train_graphs: Vec<ScanGraph> = graphs
            .into_iter()
            .filter(|g| ds.scan(&g.scan_id).is_some_and(|s| s.split == Split::Train))
            .collect();
        let positives = train_graphs.iter().filter(|g| g.label == Some(true)).count();
        let dir = self.stage_dir(Stage::Train);
        let (model, trace, pretrained) = match &self.config.train.pretrained {
            Some(path) => (load_model(path)?, Vec::new(), true),
            None => {
                let model = ClassifierModel::new(self.config.classifier.clone())?;
                let out = train(model, &train_graphs)?;
                (out.model, out.trace, false)
            }
        };
        write_json(
            &dir.join("trace.json"),
            &TrainSummary {
                pretrained,
                train_graphs: train_graphs.len(),
                positives,
                trace,
            },
        )?;
        save_model(&dir.join(Stage::Train.artifact()), &model)
    }

    fn stage_classify(&self) -> Result<()> {
        let ds = self.dataset(Stage::Classify)?;
        let graphs = self.graphs(Stage::Classify)?;
        let model = load_model(&self.require(Stage::Classify, Stage::Train)?)?;
        let probs = predict_all(&model, &graphs)?;
        let by_id: BTreeMap<&str, f64> = graphs
            .iter()
            .map(|g| g.scan_id.as_str())
            .zip(probs)
            .collect();
        let scores: Vec<ScoreRecord> = ds
            .scans
            .iter()
            .map(|s| {
                let p = by_id.get(s.scan_id.as_str()).copied();
                ScoreRecord {
                    scan_id: s.scan_id.clone(),
                    split: s.split,
                    abnormal: s.is_abnormal(),
                    probability: p.unwrap_or(0.0),
                    no_segment: p.is_none(),
                }
            })
            .collect();
        write_jsonl(&self.artifact(Stage::Classify), &scores)
    }

    fn scores(&self, current: Stage) -> Result<Vec<ScoreRecord>> {
        let scores: Vec<ScoreRecord> = read_jsonl(&self.require(current, Stage::Classify)?)?;
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(&s.probability)) {
            return Err(Error::validation(
                format!("score for scan {}", s.scan_id),
                format!("probability {} outside [0, 1]", s.probability),
            ));
        }
        Ok(scores)
    }

    fn stage_threshold(&self) -> Result<()> {
        let scores = self.scores(Stage::Threshold)?;
        let curve = test_curve(&scores)?;
        let mut points = Vec::new();
        let mut skipped = Vec::new();
        for p in &self.config.threshold.points {
            let Some(curve) = &curve else {
                skipped.push(SkippedPoint {
                    name: p.name.clone(),
                    reason: "test split has a single class".into(),
                });
                continue;
            };
            match pick_operating_point(curve, p.mode) {
                Ok(op) => points.push(ThresholdEntry {
                    name: p.name.clone(),
                    source: PointSource::Picked,
                    mode: Some(p.mode),
                    threshold: op.threshold,
                }),
                Err(Error::NoFeasiblePoint(reason)) => skipped.push(SkippedPoint {
                    name: p.name.clone(),
                    reason: format!("no feasible point for {reason}"),
                }),
                Err(e) => return Err(e),
            }
        }
        for p in &self.config.threshold.presets {
            points.push(ThresholdEntry {
                name: p.name.clone(),
                source: PointSource::Preset,
                mode: None,
                threshold: p.threshold,
            });
        }
        write_json(
            &self.artifact(Stage::Threshold),
            &Thresholds {
                single_class: curve.is_none(),
                points,
                skipped,
            },
        )
    }

    fn stage_localize(&self) -> Result<()> {
        let ds = self.dataset(Stage::Localize)?;
        let outputs = self.outputs(Stage::Localize)?;
        let cfg = &self.config.localize;
        let locs = outputs
            .par_iter()
            .filter(|o| ds.scan(&o.scan_id).is_some_and(|s| s.split == Split::Test))
            .map(|o| -> Result<Vec<Localization>> {
                Side::BOTH
                    .into_iter()
                    .map(|side| localize_with(o, side, cfg.radius, cfg.window))
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;
        write_jsonl(&self.artifact(Stage::Localize), locs.iter().flatten())
    }

    fn stage_evaluate(&self) -> Result<()> {
        let ds = self.dataset(Stage::Evaluate)?;
        let soi: SoiSummary = read_json(&self.stage_dir(Stage::Soi).join("summary.json"))?;
        let outputs = self.outputs(Stage::Evaluate)?;
        let scores = self.scores(Stage::Evaluate)?;
        let thresholds: Thresholds = read_json(&self.require(Stage::Evaluate, Stage::Threshold)?)?;
        let locs: Vec<Localization> = read_jsonl(&self.require(Stage::Evaluate, Stage::Localize)?)?;

        let test: Vec<&ScoreRecord> = scores.iter().filter(|s| s.split == Split::Test).collect();
        let curve = test_curve(&scores)?;
        let points = thresholds
            .points
            .iter()
            .map(|t| PointEvaluation {
                threshold: t.threshold,
                source: t.source,
                metrics: MetricRow::new(
                    &t.name,
                    ConfusionMatrix::from_pairs(
                        test.iter().map(|s| (s.probability >= t.threshold, s.abnormal)),
                    ),
                ),
            })
            .collect();
        let classifier = ClassifierEvaluation {
            single_class: curve.is_none(),
            auc: curve.as_ref().map(|c| c.auc),
            roc: curve,
            points,
        };

        let by_id: BTreeMap<&str, &EnsembleOutput> =
            outputs.iter().map(|o| (o.scan_id.as_str(), o)).collect();
        let runs: Vec<(usize, bool, Vec<Vec<bool>>)> = test
            .iter()
            .map(|s| {
                let flags = by_id
                    .get(s.scan_id.as_str())
                    .map(|o| slice_flags(o).rows)
                    .unwrap_or_default();
                (longest_majority_run(&flags), s.abnormal, flags)
            })
            .collect();
        let baseline_scores: Vec<(f64, bool)> =
            runs.iter().map(|(r, a, _)| (*r as f64, *a)).collect();
        let baseline = BaselineEvaluation {
            auc: roc_or_none(&baseline_scores)?.map(|c| c.auc),
            sweep: (0..=self.config.evaluate.baseline_max_run)
                .map(|s_min| {
                    MetricRow::new(
                        s_min.to_string(),
                        ConfusionMatrix::from_pairs(
                            runs.iter()
                                .map(|(_, a, f)| (majority_vote_baseline(f, s_min), *a)),
                        ),
                    )
                })
                .collect(),
        };

        let ensemble = self.ensemble_tables(&ds, &outputs)?;
        let localization = self.localization_columns(&ds, &test, &thresholds, &locs)?;
        let eval = Evaluation {
            split: ds.split_report(),
            soi,
            ensemble,
            classifier,
            baseline,
            localization,
        };
        write_json(&self.artifact(Stage::Evaluate), &eval)
    }

    fn localization_columns(
        &self,
        ds: &Dataset,
        test: &[&ScoreRecord],
        thresholds: &Thresholds,
        locs: &[Localization],
    ) -> Result<Vec<LocalizationColumn>> {
        let area = self.config.localize.area;
        let by_key: BTreeMap<(&str, Side), &Localization> =
            locs.iter().map(|l| ((l.scan_id.as_str(), l.side), l)).collect();
        // per abnormal test scan and side: (distance, iou)
        let mut per_scan: BTreeMap<&str, Vec<(Side, usize, f64)>> = BTreeMap::new();
        for s in test.iter().filter(|s| s.abnormal) {
            let scan = ds.scan(&s.scan_id).ok_or_else(|| {
                Error::validation(format!("score for scan {}", s.scan_id), "scan not in manifest")
            })?;
            let entry = per_scan.entry(s.scan_id.as_str()).or_default();
            for side in Side::BOTH {
                let truth = scan.abnormal_slices(side);
                let Some(loc) = by_key.get(&(s.scan_id.as_str(), side)) else {
                    continue;
                };
                if truth.is_empty() {
                    continue;
                }
                // closest annotated slice, lower index on ties
                let nearest = *truth
                    .iter()
                    .min_by_key(|&&t| (t.abs_diff(loc.slice), t))
                    .expect("non-empty");
                let gt = scan.labels[&nearest].abnormal_box(side).expect("abnormal slice");
                let iou = loc.bbox.map_or(0.0, |b| iou_2d_with(&b, &gt, area));
                entry.push((side, nearest.abs_diff(loc.slice), iou));
            }
        }
        let column = |name: &str, threshold: f64| {
            let chosen: Vec<&str> = test
                .iter()
                .filter(|s| s.abnormal && s.probability >= threshold)
                .map(|s| s.scan_id.as_str())
                .collect();
            let stats = |side: Side| {
                let vals: Vec<(usize, f64)> = chosen
                    .iter()
                    .flat_map(|id| per_scan.get(id).into_iter().flatten())
                    .filter(|(sd, _, _)| *sd == side)
                    .map(|&(_, d, iou)| (d, iou))
                    .collect();
                SideStats {
                    count: vals.len(),
                    mean_iou: mean(vals.iter().map(|v| v.1)),
                    mean_delta: mean(vals.iter().map(|v| v.0 as f64)),
                }
            };
            LocalizationColumn {
                name: name.to_owned(),
                threshold,
                eval_base: chosen.len(),
                left: stats(Side::Left),
                right: stats(Side::Right),
            }
        };
        let mut cols: Vec<LocalizationColumn> = thresholds
            .points
            .iter()
            .map(|t| column(&t.name, t.threshold))
            .collect();
        cols.push(column("all abnormal", 0.0));
        Ok(cols)
    }

    fn stage_report(&self) -> Result<()> {
        let missing = self.missing_stages(Stage::Evaluate);
        if !missing.is_empty() {
            let names: Vec<&str> = missing.iter().map(|s| s.name()).collect();
            return Err(Error::stage(
                "report",
                format!("incomplete run, missing stages: {}", names.join(", ")),
            ));
        }
        let eval: Evaluation = read_json(&self.artifact(Stage::Evaluate))?;
        let dir = self.stage_dir(Stage::Report);
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write(Stage::Report.artifact(), report::render_text(&eval))?;
        if let Some(roc) = &eval.classifier.roc {
            write("roc.csv", report::roc_csv(roc))?;
            write("roc.svg", report::roc_svg(roc, &eval.classifier.points))?;
        }
        Ok(())
    }
}

fn soi_summary(records: &[SoiRecord]) -> SoiSummary {
    let evaluated: Vec<&SoiRecord> = records.iter().filter(|r| r.iou.is_some()).collect();
    SoiSummary {
        scans: records.len(),
        with_segment: records.iter().filter(|r| r.segment.is_some()).count(),
        no_segment: records
            .iter()
            .filter(|r| r.segment.is_none())
            .map(|r| r.scan_id.clone())
            .collect(),
        evaluated: evaluated.len(),
        covering: evaluated
            .iter()
            .filter(|r| r.left_delta >= Some(0.0) && r.right_delta >= Some(0.0))
            .count(),
        mean_iou: mean(evaluated.iter().filter_map(|r| r.iou)),
        mean_left_delta: mean(evaluated.iter().filter_map(|r| r.left_delta)),
        mean_right_delta: mean(evaluated.iter().filter_map(|r| r.right_delta)),
        mean_segment_fraction: mean(
            records
                .iter()
                .filter_map(|r| r.segment.map(|s| s.len() as f64 / r.n_slices as f64)),
        ),
    }
}

fn roc_or_none(scores: &[(f64, bool)]) -> Result<Option<RocCurve>> {
    let pos = scores.iter().filter(|s| s.1).count();
    if pos == 0 || pos == scores.len() {
        return Ok(None);
    }
    roc_curve(scores).map(Some)
}

/// ROC of the test split, or `None` when it holds a single class.
fn test_curve(scores: &[ScoreRecord]) -> Result<Option<RocCurve>> {
    let pairs: Vec<(f64, bool)> = scores
        .iter()
        .filter(|s| s.split == Split::Test)
        .map(|s| (s.probability, s.abnormal))
        .collect();
    roc_or_none(&pairs)
}
