//! Scan manifests and their JSON-Lines label, detection and probability files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::soi::ProbabilitySignal;
use crate::types::{DetectionRecord, ScanRecord, SliceLabel, Split};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const PROBABILITIES_FILE: &str = "probabilities.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scan_id: String,
    pub n_slices: usize,
    pub split: Split,
    pub image_dims: (usize, usize),
    pub label_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scans: Vec<ManifestEntry>,
}

/// One line of a labels file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelLine {
    pub scan_id: String,
    pub slice_index: usize,
    #[serde(flatten)]
    pub label: SliceLabel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub scans: Vec<ScanRecord>,
    /// `None` when no detection files are attached.
    pub detections: Option<Vec<DetectionRecord>>,
    /// `None` when no probability files are attached.
    pub probabilities: Option<Vec<ProbabilitySignal>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub scans: usize,
    pub abnormal: usize,
    pub prevalence: f64,
    pub train: usize,
    pub train_abnormal: usize,
    pub test: usize,
    pub test_abnormal: usize,
}

/// Parse every non-blank line of a JSON-Lines file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path)
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(origin, i + 1, e)))
        .collect()
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn scan(&self, scan_id: &str) -> Option<&ScanRecord> {
        self.scans.iter().find(|s| s.scan_id == scan_id)
    }

    /// Check every record against its scan.
    pub fn validate(&self) -> Result<()> {
        let mut by_id = BTreeMap::new();
        for scan in &self.scans {
            scan.validate()?;
            if by_id.insert(scan.scan_id.as_str(), scan).is_some() {
                return Err(Error::validation(
                    format!("scan {}", scan.scan_id),
                    "duplicate scan_id",
                ));
            }
        }
        let owner = |id: &str, what: &str| {
            by_id.get(id).copied().ok_or_else(|| {
                Error::validation(format!("{what} for scan {id}"), "scan not in manifest")
            })
        };
        for d in self.detections.iter().flatten() {
            d.validate(owner(&d.scan_id, "detection")?.n_slices, None)?;
        }
        let mut seen = BTreeSet::new();
        for p in self.probabilities.iter().flatten() {
            p.validate(owner(&p.scan_id, "probabilities")?.n_slices)?;
            if !seen.insert(p.scan_id.as_str()) {
                return Err(Error::validation(
                    format!("probabilities for scan {}", p.scan_id),
                    "more than one signal",
                ));
            }
        }
        Ok(())
    }

    pub fn split_report(&self) -> SplitReport {
        let count = |split: Option<Split>| {
            let it = self
                .scans
                .iter()
                .filter(|s| split.is_none_or(|sp| s.split == sp));
            let all = it.clone().count();
            (all, it.filter(|s| s.is_abnormal()).count())
        };
        let (scans, abnormal) = count(None);
        let (train, train_abnormal) = count(Some(Split::Train));
        let (test, test_abnormal) = count(Some(Split::Test));
        SplitReport {
            scans,
            abnormal,
            prevalence: if scans == 0 { 0.0 } else { abnormal as f64 / scans as f64 },
            train,
            train_abnormal,
            test,
            test_abnormal,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load a manifest and every file it references. Relative paths resolve
/// against the manifest's directory; several scans may share one file.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let ids: BTreeSet<&str> = manifest.scans.iter().map(|e| e.scan_id.as_str()).collect();
    let files = |pick: fn(&ManifestEntry) -> Option<&PathBuf>| -> Vec<PathBuf> {
        let mut seen = BTreeSet::new();
        manifest
            .scans
            .iter()
            .filter_map(pick)
            .map(|p| resolve(base, p))
            .filter(|p| seen.insert(p.clone()))
            .collect()
    };

    let mut labels: BTreeMap<String, BTreeMap<usize, SliceLabel>> = BTreeMap::new();
    for path in files(|e| Some(&e.label_file)) {
        for (n, line) in read_jsonl::<LabelLine>(&path)?.into_iter().enumerate() {
            if !ids.contains(line.scan_id.as_str()) {
                continue;
            }
            let slot = labels.entry(line.scan_id.clone()).or_default();
            if slot.insert(line.slice_index, line.label).is_some() {
                return Err(Error::parse(
                    &path,
                    n + 1,
                    format!(
                        "duplicate label for scan {} slice {}",
                        line.scan_id, line.slice_index
                    ),
                ));
            }
        }
    }

    let scans = manifest
        .scans
        .iter()
        .map(|e| ScanRecord {
            scan_id: e.scan_id.clone(),
            n_slices: e.n_slices,
            labels: labels.remove(&e.scan_id).unwrap_or_default(),
            split: e.split,
            image_dims: e.image_dims,
        })
        .collect();

    let det_files = files(|e| e.detections_file.as_ref());
    let detections = if det_files.is_empty() {
        None
    } else {
        let mut all = Vec::new();
        for path in det_files {
            all.extend(
                read_jsonl::<DetectionRecord>(&path)?
                    .into_iter()
                    .filter(|d| ids.contains(d.scan_id.as_str())),
            );
        }
        Some(all)
    };
    let prob_files = files(|e| e.probabilities_file.as_ref());
    let probabilities = if prob_files.is_empty() {
        None
    } else {
        let mut all = Vec::new();
        for path in prob_files {
            all.extend(
                read_jsonl::<ProbabilitySignal>(&path)?
                    .into_iter()
                    .filter(|p| ids.contains(p.scan_id.as_str())),
            );
        }
        Some(all)
    };

    let ds = Dataset {
        scans,
        detections,
        probabilities,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write `dir/manifest.json` plus shared JSON-Lines files. Returns the
/// manifest path.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let label_lines: Vec<LabelLine> = ds
        .scans
        .iter()
        .flat_map(|s| {
            s.labels.iter().map(|(&i, l)| LabelLine {
                scan_id: s.scan_id.clone(),
                slice_index: i,
                label: l.clone(),
            })
        })
        .collect();
    write_jsonl(&dir.join(LABELS_FILE), &label_lines)?;
    if let Some(d) = &ds.detections {
        write_jsonl(&dir.join(DETECTIONS_FILE), d)?;
    }
    if let Some(p) = &ds.probabilities {
        write_jsonl(&dir.join(PROBABILITIES_FILE), p)?;
    }
    let manifest = Manifest {
        scans: ds
            .scans
            .iter()
            .map(|s| ManifestEntry {
                scan_id: s.scan_id.clone(),
                n_slices: s.n_slices,
                split: s.split,
                image_dims: s.image_dims,
                label_file: LABELS_FILE.into(),
                detections_file: ds.detections.as_ref().map(|_| DETECTIONS_FILE.into()),
                probabilities_file: ds.probabilities.as_ref().map(|_| PROBABILITIES_FILE.into()),
            })
            .collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BoundingBox, Side};

    fn scan(id: &str, abnormal: bool, split: Split) -> ScanRecord {
        let b = BoundingBox::new(10.0, 10.0, 30.0, 40.0).unwrap();
        let mut labels = BTreeMap::new();
        labels.insert(
            3,
            SliceLabel {
                normal_boxes: vec![(Side::Left, b)],
                abnormal_boxes: if abnormal { vec![(Side::Right, b)] } else { vec![] },
            },
        );
        ScanRecord {
            scan_id: id.into(),
            n_slices: 8,
            labels,
            split,
            image_dims: (64, 64),
        }
    }

    fn sample() -> Dataset {
        Dataset {
            scans: vec![scan("a", true, Split::Train), scan("b", false, Split::Test)],
            detections: Some(vec![DetectionRecord {
                scan_id: "a".into(),
                slice_index: 3,
                model_id: 1,
                side: Side::Right,
                bbox: BoundingBox::new(11.0, 9.5, 29.0, 41.25).unwrap(),
                score: 0.8125,
            }]),
            probabilities: Some(vec![ProbabilitySignal {
                scan_id: "b".into(),
                probs: vec![0.0, 0.1, 0.5, 0.9, 0.9, 0.3, 0.0, 1.0 / 3.0],
            }]),
        }
    }

    #[test]
    fn round_trip_and_prevalence() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        let manifest = save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back, ds);
        let report = back.split_report();
        assert_eq!(report.scans, 2);
        assert_eq!(report.prevalence, 0.5);
        assert_eq!((report.train, report.train_abnormal), (1, 1));
        assert_eq!((report.test, report.test_abnormal), (1, 0));
    }

    #[test]
    fn missing_detection_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(dir.path(), &sample()).unwrap();
        fs::remove_file(dir.path().join(DETECTIONS_FILE)).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::Io { .. })));
    }

    #[test]
    fn malformed_line_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(dir.path(), &sample()).unwrap();
        let path = dir.path().join(DETECTIONS_FILE);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{\"scan_id\": \"a\"\n");
        fs::write(&path, text).unwrap();
        match load_dataset(&manifest) {
            Err(Error::Parse { path: p, line, .. }) => {
                assert_eq!(p, path);
                assert_eq!(line, 2);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invariant_violation_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = sample();
        ds.detections.as_mut().unwrap()[0].slice_index = 8;
        assert!(matches!(
            save_dataset(dir.path(), &ds),
            Err(Error::Validation { record, .. }) if record.contains("slice 8")
        ));
        let mut ds = sample();
        ds.detections.as_mut().unwrap()[0].scan_id = "zzz".into();
        assert!(ds.validate().is_err());
    }

    #[test]
    fn optional_files_stay_absent() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            detections: None,
            probabilities: None,
            ..sample()
        };
        let manifest = save_dataset(dir.path(), &ds).unwrap();
        assert!(!dir.path().join(DETECTIONS_FILE).exists());
        assert_eq!(load_dataset(&manifest).unwrap(), ds);
    }

    #[test]
    fn label_file_format() {
        let line: LabelLine = serde_json::from_str(
            r#"{"scan_id":"x","slice_index":2,"normal_boxes":[["left",[1,2,3,4]]],"abnormal_boxes":[]}"#,
        )
        .unwrap();
        assert_eq!(line.label.normal_boxes[0].0, Side::Left);
        assert_eq!(line.label.normal_boxes[0].1.coords(), [1.0, 2.0, 3.0, 4.0]);
    }
}
