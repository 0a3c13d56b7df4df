//! Pipeline configuration, read from TOML. Every section and field is
//! optional; omitted values take the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::Hyperparams;
use crate::ensemble::{Aggregate, DEFAULT_NUM_MODELS};
use crate::error::{Error, Result};
use crate::localize::DEFAULT_RADIUS;
use crate::metrics::{
    AreaConvention, OperatingMode, PRESET_THRESHOLD_A, PRESET_THRESHOLD_B, PRESET_THRESHOLD_C,
};
use crate::soi::{DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Run directory name under the runs root.
    pub name: String,
    pub dataset: DatasetSection,
    pub synth: SynthConfig,
    pub soi: SoiSection,
    pub ensemble: EnsembleSection,
    pub graph: GraphSection,
    pub classifier: Hyperparams,
    pub train: TrainSection,
    pub threshold: ThresholdSection,
    pub localize: LocalizeSection,
    pub evaluate: EvaluateSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            name: "default".into(),
            dataset: DatasetSection::default(),
            synth: SynthConfig::default(),
            soi: SoiSection::default(),
            ensemble: EnsembleSection::default(),
            graph: GraphSection::default(),
            classifier: Hyperparams::default(),
            train: TrainSection::default(),
            threshold: ThresholdSection::default(),
            localize: LocalizeSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Manifest of a dataset on disk. When absent the `synth` section
    /// generates one.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoiSection {
    pub threshold: f64,
    pub window: usize,
    /// Slices added on each side of the annotated span when scoring
    /// predicted segments.
    pub gt_segment_pad: usize,
}

impl Default for SoiSection {
    fn default() -> Self {
        SoiSection {
            threshold: DEFAULT_THRESHOLD,
            window: DEFAULT_WINDOW,
            gt_segment_pad: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub num_models: usize,
    /// Aggregate confusion tables reported next to the per-model ones.
    pub aggregate: AggregateTables,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateTables {
    #[default]
    Both,
    Union,
    Intersection,
    None,
}

impl AggregateTables {
    pub fn modes(self) -> Vec<Aggregate> {
        match self {
            AggregateTables::Both => vec![Aggregate::Union, Aggregate::Intersection],
            AggregateTables::Union => vec![Aggregate::Union],
            AggregateTables::Intersection => vec![Aggregate::Intersection],
            AggregateTables::None => vec![],
        }
    }
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            num_models: DEFAULT_NUM_MODELS,
            aggregate: AggregateTables::Both,
        }
    }
}

/// Scaling of box coordinates in node features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScaling {
    /// Divide by each scan's image width and height.
    #[default]
    Image,
    Raw,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub feature_scale: FeatureScaling,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Load this model instead of training one.
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPoint {
    pub name: String,
    #[serde(flatten)]
    pub mode: OperatingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetThreshold {
    pub name: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSection {
    /// Operating points picked on the test ROC curve.
    pub points: Vec<NamedPoint>,
    /// Fixed thresholds reported alongside the picked points.
    pub presets: Vec<PresetThreshold>,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        ThresholdSection {
            points: vec![
                NamedPoint {
                    name: "B".into(),
                    mode: OperatingMode::MaxTprAtFprCap { fpr_cap: 0.03 },
                },
                NamedPoint {
                    name: "A".into(),
                    mode: OperatingMode::TopLeft,
                },
                NamedPoint {
                    name: "C".into(),
                    mode: OperatingMode::MinFprAtTprFloor { tpr_floor: 0.85 },
                },
            ],
            presets: [
                ("preset B", PRESET_THRESHOLD_B),
                ("preset A", PRESET_THRESHOLD_A),
                ("preset C", PRESET_THRESHOLD_C),
            ]
            .into_iter()
            .map(|(name, threshold)| PresetThreshold {
                name: name.into(),
                threshold,
            })
            .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeSection {
    pub radius: usize,
    pub window: usize,
    pub area: AreaConvention,
}

impl Default for LocalizeSection {
    fn default() -> Self {
        LocalizeSection {
            radius: DEFAULT_RADIUS,
            window: DEFAULT_WINDOW,
            area: AreaConvention::Continuous,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Largest minimum-run length swept for the majority-vote baseline.
    pub baseline_max_run: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { baseline_max_run: 11 }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Seed both the generator and the classifier.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.classifier.seed = seed;
    }

    /// Check every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == ".." {
            return Err(Error::Config(format!(
                "run name must be a plain directory name, got {:?}",
                self.name
            )));
        }
        if !(self.soi.threshold > 0.0 && self.soi.threshold < 1.0) {
            return Err(Error::Config(format!(
                "soi.threshold must lie in (0, 1), got {}",
                self.soi.threshold
            )));
        }
        for (name, w) in [("soi.window", self.soi.window), ("localize.window", self.localize.window)] {
            if w == 0 || w % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd and positive, got {w}")));
            }
        }
        if self.ensemble.num_models == 0 {
            return Err(Error::Config("ensemble.num_models must be at least 1".into()));
        }
        if self.dataset.manifest.is_none() {
            self.synth.validate()?;
            if self.synth.num_models() != self.ensemble.num_models {
                return Err(Error::Config(format!(
                    "synth simulates {} models but ensemble.num_models is {}",
                    self.synth.num_models(),
                    self.ensemble.num_models
                )));
            }
        }
        self.classifier.validate()?;
        let mut names = std::collections::BTreeSet::new();
        for p in &self.threshold.points {
            if !names.insert(p.name.as_str()) {
                return Err(Error::Config(format!("duplicate operating point {:?}", p.name)));
            }
            let ok = match p.mode {
                OperatingMode::TopLeft => true,
                OperatingMode::MaxTprAtFprCap { fpr_cap } => (0.0..=1.0).contains(&fpr_cap),
                OperatingMode::MinFprAtTprFloor { tpr_floor } => (0.0..=1.0).contains(&tpr_floor),
            };
            if !ok {
                return Err(Error::Config(format!(
                    "operating point {:?}: cap/floor must lie in [0, 1]",
                    p.name
                )));
            }
        }
        for p in &self.threshold.presets {
            if !names.insert(p.name.as_str()) {
                return Err(Error::Config(format!("duplicate operating point {:?}", p.name)));
            }
            if !(0.0..=1.0).contains(&p.threshold) {
                return Err(Error::Config(format!(
                    "preset {:?}: threshold must lie in [0, 1]",
                    p.name
                )));
            }
        }
        Ok(())
    }
}
