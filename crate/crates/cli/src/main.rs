use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use std::path::{Path, PathBuf};

use crosswatch::avoidance::evaluate_avoidance;
use crosswatch::classifier::{save_forest, DistanceThresholds, PairDataset};
use crosswatch::detection::{score_detection, DetectionLog, Method};
use crosswatch::features::{DatasetMeta, PreparedDataset};
use crosswatch::harness::{
    self, build_pairs, detect_all, forecaster, load_models, load_saved_trace, prepare_dataset, read_json,
    render_reports, run_experiment, save_trace, write_json, ExperimentConfig, Importance, MetricsBundle, RunDir,
    Seeds,
};
use crosswatch::predictor::PointModel;
use crosswatch::uncertainty::{Axis2, IntervalModels, QuantileModel};
use crosswatch::world::trace::{load_trace_csv, TraceMeta};
use crosswatch::world::{detect_ground_truth_collisions, Trace};

#[derive(Parser)]
#[command(name = "crosswatch", version, about = "Intersection collision warning experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Derive every seed from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) the training and evaluation traces.
    Generate,
    /// Cut windows, split by vehicle and scale.
    Prepare,
    TrainPoint,
    TrainQuantile {
        #[arg(long)]
        axis: Axis2,
    },
    /// Build the labelled pair set from training-trace forecasts.
    Pairs,
    TrainRfc {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run all detectors over a trace.
    Detect {
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Braking evaluation of a detection log.
    Avoid {
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        alarms: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Render figures from metrics.json.
    Report,
    /// Every stage in sequence.
    RunAll,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = Seeds::from_base(s);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn update_bundle(cfg: &ExperimentConfig, dir: &RunDir, f: impl FnOnce(&mut MetricsBundle)) -> Result<()> {
    let path = dir.metrics();
    let mut b = if path.exists() {
        MetricsBundle::load(&path)?
    } else {
        MetricsBundle::default()
    };
    b.config_hash = cfg.hash();
    f(&mut b);
    b.save(&path)?;
    Ok(())
}

fn load_trace_any(dir: &RunDir, path: Option<&Path>, which: &str) -> Result<Trace> {
    match path {
        None => Ok(load_saved_trace(dir, which)?),
        Some(p) => {
            let meta: TraceMeta = read_json(&dir.trace_meta()).context("reading trace layout")?;
            let mut t = load_trace_csv(p, meta.layout)?;
            t.meta.tick = meta.tick;
            Ok(t)
        }
    }
}

fn dataset_meta(dir: &RunDir) -> Result<DatasetMeta> {
    Ok(read_json(&dir.dataset().join("dataset.json"))?)
}

fn interval_models(dir: &RunDir) -> Result<IntervalModels> {
    let lat = QuantileModel::load(&dir.quantile_model(Axis2::Lat))?;
    let lon = QuantileModel::load(&dir.quantile_model(Axis2::Lon))?;
    Ok(IntervalModels::new(lat, lon)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = config(&cli)?;
    let dir = RunDir(cfg.out_dir.clone());
    match &cli.command {
        Command::Generate => {
            let traces = harness::load_traces(&cfg)?;
            for (which, t) in [("train", &traces.train), ("eval", &traces.eval)] {
                save_trace(&dir, which, t)?;
                let c = detect_ground_truth_collisions(t);
                info!("{which}: {} vehicles, {} collisions", t.vehicles.len(), c.len());
                write_json(&dir.collisions(which), &c)?;
            }
        }
        Command::Prepare => {
            let trace = load_saved_trace(&dir, "train")?;
            let ds = prepare_dataset(&trace, &cfg.data, cfg.seeds.split)?;
            ds.save(&dir.dataset())?;
            info!("windows: {:?}", ds.meta.counts);
        }
        Command::TrainPoint => {
            let ds = PreparedDataset::load(&dir.dataset())?;
            let m = harness::train_point(&ds, &cfg.point, cfg.seeds.point)?;
            m.save(&dir.point_model())?;
            update_bundle(&cfg, &dir, |b| {
                b.training.insert("point".into(), m.0.history.clone());
            })?;
        }
        Command::TrainQuantile { axis } => {
            let ds = PreparedDataset::load(&dir.dataset())?;
            let m = harness::train_quantile(&ds, *axis, &cfg.quantile, cfg.seeds.quantile)?;
            m.save(&dir.quantile_model(*axis))?;
            let key = match axis {
                Axis2::Lat => "quantile_lat",
                Axis2::Lon => "quantile_lon",
            };
            update_bundle(&cfg, &dir, |b| {
                b.training.insert(key.into(), m.net.history.clone());
            })?;
            let other = match axis {
                Axis2::Lat => Axis2::Lon,
                Axis2::Lon => Axis2::Lat,
            };
            if dir.point_model().exists() && dir.quantile_model(other).exists() {
                let point = PointModel::load(&dir.point_model())?;
                let intervals = interval_models(&dir)?;
                let eval = harness::evaluate_predictors(&ds, &point, &intervals, &cfg.kalman)?;
                info!("test-split errors and coverage recorded");
                update_bundle(&cfg, &dir, |b| {
                    b.errors = Some(eval.errors);
                    b.coverage = Some(eval.coverage);
                })?;
            }
        }
        Command::Pairs => {
            let trace = load_saved_trace(&dir, "train")?;
            let meta = dataset_meta(&dir)?;
            let point = PointModel::load(&dir.point_model())?;
            let intervals = interval_models(&dir)?;
            let fc = forecaster(&meta, &point, &intervals, cfg.k_epsilon_mode)?;
            let forecasts = fc.forecast_trace(&trace)?;
            let collisions = detect_ground_truth_collisions(&trace);
            let (pairs, thresholds, summary) = build_pairs(&trace, &forecasts, &collisions, &cfg)?;
            pairs.save(&dir.pairs())?;
            write_json(&dir.thresholds(), &thresholds)?;
            info!("pairs: {summary:?}");
            update_bundle(&cfg, &dir, |b| {
                b.thresholds = Some(thresholds);
                b.pairs = Some(summary);
            })?;
        }
        Command::TrainRfc { data } => {
            let pairs = PairDataset::load(data.as_deref().unwrap_or(&dir.pairs()))?;
            let thresholds: DistanceThresholds = read_json(&dir.thresholds())?;
            let forest = harness::train_forest(&pairs, &cfg.classifier.forest, cfg.seeds.forest)?;
            save_forest(&dir.forest(), &forest, &thresholds)?;
            update_bundle(&cfg, &dir, |b| b.importance = Some(Importance::of(&forest, cfg.data.horizon)))?;
        }
        Command::Detect { trace, models } => {
            let models_dir = models.clone().map(RunDir).unwrap_or_else(|| dir.clone());
            let trace = load_trace_any(&dir, trace.as_deref(), "eval")?;
            let meta = dataset_meta(&models_dir)?;
            let (point, intervals, forest, thresholds) = load_models(&models_dir)?;
            let fc = forecaster(&meta, &point, &intervals, cfg.k_epsilon_mode)?;
            let forecasts = fc.forecast_trace(&trace)?;
            let collisions = detect_ground_truth_collisions(&trace);
            let logs = detect_all(&trace, &forecasts, &forest, &thresholds, &cfg)?;
            let mut scored = Vec::new();
            for log in &logs {
                log.save(&dir.detection_log(log.method))?;
                let m = score_detection(log, &collisions, &trace);
                info!("{}: TP {} FP {} FN {}", log.method.name(), m.true_positives, m.false_positives, m.false_negatives);
                scored.push((log.method.name().to_string(), m));
            }
            let snap = harness::snapshot(&trace, &forecasts, &logs[0], &collisions, meta.input_ticks);
            update_bundle(&cfg, &dir, |b| {
                b.detection.extend(scored);
                b.snapshot = snap;
            })?;
        }
        Command::Avoid { trace, alarms, trials } => {
            let trace = load_trace_any(&dir, trace.as_deref(), "eval")?;
            let log_path = alarms.clone().unwrap_or_else(|| dir.detection_log(Method::RandomForest));
            let log = DetectionLog::load(&log_path, trace.tick())?;
            let mut av = cfg.avoidance.clone().unwrap_or_default();
            if let Some(n) = trials {
                av.trials = *n;
            }
            let collisions = detect_ground_truth_collisions(&trace);
            let report = evaluate_avoidance(&trace, &collisions, &log, &av, cfg.seeds.avoidance)?;
            for c in &report.cells {
                info!(
                    "decel {} {:?}: avoided {}/{} detected, mean speed reduction {:?}",
                    c.decel, c.driver, c.avoided, c.detected, c.mean_speed_reduction
                );
            }
            update_bundle(&cfg, &dir, |b| b.avoidance = Some(report))?;
        }
        Command::Report => {
            let path = dir.metrics();
            if !path.exists() {
                bail!("{} not found; run the pipeline first", path.display());
            }
            let bundle = MetricsBundle::load(&path)?;
            let files = render_reports(&bundle, &dir.reports())?;
            info!("wrote {} files", files.files.len());
        }
        Command::RunAll => {
            let out = run_experiment(&cfg)?;
            info!("metrics written to {}", dir.metrics().display());
            if let Some(r) = out.reports {
                info!("wrote {} report files", r.files.len());
            }
        }
    }
    Ok(())
}
