use std::fs;
use std::path::Path;

use mmga::classifier::{load_model, ClassifierModel};
use mmga::config::PipelineConfig;
use mmga::dataset::{load_dataset, read_json, read_jsonl};
use mmga::ensemble::EnsembleOutput;
use mmga::graph::ScanGraph;
use mmga::localize::Localization;
use mmga::pipeline::{
    Evaluation, Run, ScoreRecord, SoiRecord, Stage, Thresholds, TrainSummary, CONFIG_SNAPSHOT,
};
use mmga::types::DetectionRecord;
use mmga::Error;

fn small_config(name: &str) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.name = name.into();
    cfg.synth.n_scans = 60;
    cfg.synth.prevalence = 0.3;
    cfg.classifier.epochs = 2;
    cfg.classifier.hidden_size = 12;
    cfg
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::new(tmp.path().join("r"), small_config("r")).unwrap();
    run.run_all().unwrap();
    for stage in Stage::ALL {
        assert!(run.is_complete(stage), "{stage} incomplete");
    }
    assert!(run.missing_stages(Stage::Report).is_empty());
    for f in ["roc.csv", "roc.svg"] {
        assert!(run.stage_dir(Stage::Report).join(f).is_file());
    }

    // every artifact reads back into its schema
    let ds = load_dataset(&run.artifact(Stage::Dataset)).unwrap();
    ds.validate().unwrap();
    let soi: Vec<SoiRecord> = read_jsonl(&run.artifact(Stage::Soi)).unwrap();
    assert_eq!(soi.len(), ds.scans.len());
    let outputs: Vec<EnsembleOutput> = read_jsonl(&run.artifact(Stage::Ensemble)).unwrap();
    outputs.iter().for_each(|o| o.validate().unwrap());
    let graphs: Vec<ScanGraph> = read_jsonl(&run.artifact(Stage::Graphs)).unwrap();
    graphs.iter().for_each(|g| g.validate().unwrap());
    assert_eq!(graphs.len(), outputs.len());
    load_model(&run.artifact(Stage::Train)).unwrap();
    let trace: TrainSummary = read_json(&run.stage_dir(Stage::Train).join("trace.json")).unwrap();
    assert_eq!(trace.trace.len(), 2);
    assert!(!trace.pretrained);
    let scores: Vec<ScoreRecord> = read_jsonl(&run.artifact(Stage::Classify)).unwrap();
    assert_eq!(scores.len(), ds.scans.len());
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(&s.probability)));
    let th: Thresholds = read_json(&run.artifact(Stage::Threshold)).unwrap();
    assert_eq!(th.points.len() + th.skipped.len(), 6);
    let locs: Vec<Localization> = read_jsonl(&run.artifact(Stage::Localize)).unwrap();
    assert!(locs.len() % 2 == 0);
    let eval: Evaluation = read_json(&run.artifact(Stage::Evaluate)).unwrap();
    assert_eq!(eval.split.scans, 60);
    assert_eq!(eval.baseline.sweep.len(), 12);
    assert_eq!(eval.localization.last().unwrap().name, "all abnormal");

    let snapshot = PipelineConfig::load(&run.dir.join(CONFIG_SNAPSHOT)).unwrap();
    assert_eq!(snapshot, run.config);
    let reopened = Run::open(&run.dir).unwrap();
    assert_eq!(reopened.config, run.config);
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::new(tmp.path().join("r"), small_config("r")).unwrap();
    run.run_all().unwrap();
    let before = read_tree(&run.dir);
    for stage in Stage::ALL.into_iter().filter(|&s| s >= Stage::Graphs) {
        fs::remove_dir_all(run.stage_dir(stage)).unwrap();
    }
    assert_eq!(run.missing_stages(Stage::Report).first(), Some(&Stage::Graphs));
    run.run_from(Stage::Graphs).unwrap();
    assert_eq!(read_tree(&run.dir), before);
}

#[test]
fn missing_upstream_is_a_stage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::new(tmp.path(), small_config("r")).unwrap();
    let err = run.run_stage(Stage::Graphs).unwrap_err();
    let Error::Stage { stage, message } = &err else {
        panic!("unexpected {err}");
    };
    assert_eq!(stage, "graphs");
    assert!(message.contains("manifest.json"), "{message}");

    let err = run.run_stage(Stage::Report).unwrap_err().to_string();
    assert!(err.contains("missing stages: dataset, soi"), "{err}");
}

#[test]
fn config_conflicts_fail_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config("r");
    cfg.ensemble.num_models = 3;
    assert!(matches!(Run::new(tmp.path().join("r"), cfg), Err(Error::Config(_))));
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn single_class_test_split_is_flagged() {
    let tmp = tempfile::tempdir().unwrap();
    let trained = Run::new(tmp.path().join("t"), small_config("t")).unwrap();
    trained.run_all().unwrap();

    let mut cfg = small_config("normal");
    cfg.synth.prevalence = 0.0;
    cfg.train.pretrained = Some(trained.artifact(Stage::Train));
    let run = Run::new(tmp.path().join("normal"), cfg).unwrap();
    run.run_all().unwrap();

    let th: Thresholds = read_json(&run.artifact(Stage::Threshold)).unwrap();
    assert!(th.single_class);
    assert!(th.points.iter().all(|p| p.name.starts_with("preset")));
    assert_eq!(th.skipped.len(), 3);
    let eval: Evaluation = read_json(&run.artifact(Stage::Evaluate)).unwrap();
    assert!(eval.classifier.single_class);
    assert!(eval.classifier.roc.is_none());
    let text = fs::read_to_string(run.artifact(Stage::Report)).unwrap();
    assert!(text.contains("single class"));
    assert!(!run.stage_dir(Stage::Report).join("roc.svg").exists());
    let summary: TrainSummary = read_json(&run.stage_dir(Stage::Train).join("trace.json")).unwrap();
    assert!(summary.pretrained);
}

#[test]
fn ingested_detections_replace_simulated_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::new(tmp.path().join("r"), small_config("r")).unwrap();
    run.run_all().unwrap();
    let ds = load_dataset(&run.artifact(Stage::Dataset)).unwrap();

    run.ingest_detections(Vec::new()).unwrap();
    let outputs: Vec<EnsembleOutput> = read_jsonl(&run.artifact(Stage::Ensemble)).unwrap();
    assert!(outputs.iter().all(|o| o.detections.is_empty()));

    run.simulate_detections().unwrap();
    let outputs: Vec<EnsembleOutput> = read_jsonl(&run.artifact(Stage::Ensemble)).unwrap();
    assert!(outputs.iter().any(|o| !o.detections.is_empty()));

    let bogus = DetectionRecord {
        scan_id: "no-such-scan".into(),
        ..ds.detections.unwrap()[0].clone()
    };
    assert!(run.ingest_detections(vec![bogus]).is_err());
}

#[test]
fn pretrained_model_is_used_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    let a = Run::new(tmp.path().join("a"), small_config("a")).unwrap();
    a.run_all().unwrap();
    let mut cfg = small_config("b");
    cfg.synth.seed = 7;
    cfg.train.pretrained = Some(a.artifact(Stage::Train));
    let b = Run::new(tmp.path().join("b"), cfg).unwrap();
    b.run_all().unwrap();
    let ma: ClassifierModel = load_model(&a.artifact(Stage::Train)).unwrap();
    let mb: ClassifierModel = load_model(&b.artifact(Stage::Train)).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn stage_names_parse() {
    for s in Stage::ALL {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
    }
    assert!("bogus".parse::<Stage>().is_err());
}
