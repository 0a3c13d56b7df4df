use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmga::config::{AggregateTables, PipelineConfig};
use mmga::dataset::{read_json, read_jsonl};
use mmga::pipeline::{Evaluation, Run, Stage, CONFIG_SNAPSHOT};
use mmga::report::roc_svg;
use mmga::types::DetectionRecord;
use mmga::{Error, Result};

#[derive(Parser)]
#[command(name = "mmga", version, about = "Multi-model detection aggregation pipeline")]
struct Cli {
    /// TOML configuration file. Defaults to the run's snapshot, if any.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data synthesis and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-scan work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run directory [default: runs/<config name>].
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    soi_threshold: Option<f64>,
    #[arg(long, global = true)]
    soi_window: Option<usize>,
    #[arg(long, global = true)]
    gt_segment_pad: Option<usize>,
    #[arg(long, global = true)]
    num_models: Option<usize>,
    #[arg(long, global = true, value_parser = ["both", "union", "intersection", "none"])]
    aggregate: Option<String>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    hidden: Option<usize>,
    #[arg(long, global = true)]
    dropout: Option<f64>,
    #[arg(long, global = true)]
    knn_k: Option<usize>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the run.
    Synth,
    /// Import a dataset manifest into the run.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Extract slices of interest.
    Soi,
    /// Attach detector outputs (JSON Lines) and rebuild the ensemble stage.
    IngestDetections {
        #[arg(long)]
        detections: PathBuf,
    },
    /// Attach simulated detector outputs and rebuild the ensemble stage.
    SimulateDetections,
    /// Restrict detections to the slices of interest and tabulate them.
    Ensemble,
    /// Build one graph per scan.
    BuildGraphs,
    /// Train the graph classifier, or install a pretrained model.
    Train {
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Score every graph.
    #[command(alias = "predict")]
    Classify,
    /// Pick operating thresholds on the test ROC.
    Threshold,
    /// Localize abnormal slices and boxes.
    Localize,
    /// Compute every evaluation table.
    Evaluate,
    /// Render the text report, ROC CSV and SVG.
    Report,
    /// Run every stage, optionally resuming from one.
    Run {
        #[arg(long, default_value = "dataset")]
        from: Stage,
    },
    /// Write the ROC plot with labeled operating points.
    Plot {
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        set(&mut cfg.soi.threshold, self.soi_threshold);
        set(&mut cfg.soi.window, self.soi_window);
        set(&mut cfg.soi.gt_segment_pad, self.gt_segment_pad);
        set(&mut cfg.ensemble.num_models, self.num_models);
        set(&mut cfg.classifier.learning_rate, self.lr);
        set(&mut cfg.classifier.hidden_size, self.hidden);
        set(&mut cfg.classifier.dropout, self.dropout);
        set(&mut cfg.classifier.knn_k, self.knn_k);
        set(&mut cfg.classifier.weight_decay, self.weight_decay);
        set(&mut cfg.classifier.epochs, self.epochs);
        if let Some(a) = &self.aggregate {
            cfg.ensemble.aggregate = match a.as_str() {
                "union" => AggregateTables::Union,
                "intersection" => AggregateTables::Intersection,
                "none" => AggregateTables::None,
                _ => AggregateTables::Both,
            };
        }
    }
}

fn set<T>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}

fn resolve(cli: &Cli) -> Result<Run> {
    let snapshot = |dir: &Path| dir.join(CONFIG_SNAPSHOT);
    let mut config = match (&cli.config, &cli.run_dir) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some(dir)) if snapshot(dir).is_file() => PipelineConfig::load(&snapshot(dir))?,
        _ => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    cli.overrides.apply(&mut config);
    match &cli.command {
        Command::Prepare { manifest } => config.dataset.manifest = Some(manifest.clone()),
        Command::Train {
            pretrained: Some(p),
        } => config.train.pretrained = Some(p.clone()),
        _ => {}
    }
    let dir = cli
        .run_dir
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(&config.name));
    let run = Run::new(dir, config)?;
    run.write_config_snapshot()?;
    Ok(run)
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let run = resolve(cli)?;
    match &cli.command {
        Command::Synth | Command::Prepare { .. } => run.run_stage(Stage::Dataset)?,
        Command::Soi => run.run_stage(Stage::Soi)?,
        Command::IngestDetections { detections } => {
            let dets: Vec<DetectionRecord> = read_jsonl(detections)?;
            run.ingest_detections(dets)?;
        }
        Command::SimulateDetections => run.simulate_detections()?,
        Command::Ensemble => run.run_stage(Stage::Ensemble)?,
        Command::BuildGraphs => run.run_stage(Stage::Graphs)?,
        Command::Train { .. } => run.run_stage(Stage::Train)?,
        Command::Classify => run.run_stage(Stage::Classify)?,
        Command::Threshold => run.run_stage(Stage::Threshold)?,
        Command::Localize => run.run_stage(Stage::Localize)?,
        Command::Evaluate => run.run_stage(Stage::Evaluate)?,
        Command::Report => {
            run.run_stage(Stage::Report)?;
            let text = std::fs::read_to_string(run.artifact(Stage::Report))
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            print!("{text}");
        }
        Command::Run { from } => {
            run.run_from(*from)?;
            eprintln!("run complete: {}", run.dir.display());
        }
        Command::Plot { output } => {
            let eval: Evaluation = read_json(&run.artifact(Stage::Evaluate))?;
            let roc = eval.classifier.roc.as_ref().ok_or_else(|| {
                Error::InvalidInput("single-class evaluation has no ROC curve".into())
            })?;
            let path = output
                .clone()
                .unwrap_or_else(|| run.stage_dir(Stage::Report).join("roc.svg"));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::InvalidInput(format!("{}: {e}", parent.display())))?;
            }
            std::fs::write(&path, roc_svg(roc, &eval.classifier.points))
                .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
