//! End-to-end experiment orchestration: traces, training, detection,
//! avoidance and the metrics bundle that reports are drawn from.

mod report;

pub use report::{render_reports, ReportFiles};

use log::{info, warn};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::avoidance::{evaluate_avoidance, AvoidanceConfig, AvoidanceReport};
use crate::benchmarks::{run_ci_cws, run_relative_distance, CiCwsConfig};
use crate::classifier::{
    compute_distance_thresholds, feature_names, grouped_importance, load_forest, save_forest, DistanceThresholds,
    Forest, ForestConfig, PairDataset,
};
use crate::detection::{run_detection, score_detection, DetectionConfig, DetectionLog, DetectionMetrics, Method};
use crate::error::{Error, Result, StageContext};
use crate::features::{
    build_sequences, fit_and_apply_scaler, split_dataset, split_vehicles, DatasetMeta, FeatureLayout,
    PreparedDataset, SequenceSample, SplitRatios, HORIZON_TICKS, INPUT_TICKS,
};
use crate::forecast::{ForecastTable, Forecaster};
use crate::fusion::{k_epsilon, KMode};
use crate::nn::TrainHistory;
use crate::predictor::{evaluate_ed, kf_predict_window, stack_inputs, ErrorReport, KalmanConfig, PointModel, PointModelConfig, REPORT_STEPS};
use crate::uncertainty::{evaluate_coverage, Axis2, CoverageReport, IntervalModels, QuantileModel, QuantileModelConfig};
use crate::world::scenario::LayoutConfig;
use crate::world::trace::{load_trace_csv, tick_index, DEFAULT_TICK_S};
use crate::world::{detect_ground_truth_collisions, generate_scenario, CollisionEvent, ScenarioConfig, Trace, VehicleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// TOML scenario file; generated twice, once per seed, for training and evaluation.
    pub scenario_path: Option<PathBuf>,
    /// Inline scenario, used when no file is given.
    pub scenario: Option<ScenarioConfig>,
    /// Recorded trace CSV used for training.
    pub trace_path: Option<PathBuf>,
    /// Recorded trace CSV used for detection; defaults to `trace_path`.
    pub eval_trace_path: Option<PathBuf>,
    /// Layout and tick of recorded traces.
    pub layout: LayoutConfig,
    pub tick_s: f64,
    pub input_ticks: usize,
    pub horizon: usize,
    pub split: SplitRatios,
    /// Keep every n-th training and validation window.
    pub train_stride: usize,
    /// Length of the generated training scenario; defaults to the scenario's own duration.
    pub train_duration_s: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenario_path: None,
            scenario: None,
            trace_path: None,
            eval_trace_path: None,
            layout: LayoutConfig::default(),
            tick_s: DEFAULT_TICK_S,
            input_ticks: INPUT_TICKS,
            horizon: HORIZON_TICKS,
            split: SplitRatios::default(),
            train_stride: 1,
            train_duration_s: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub scenario: u64,
    pub eval_scenario: u64,
    pub split: u64,
    pub point: u64,
    pub quantile: u64,
    pub pairs: u64,
    pub forest: u64,
    pub avoidance: u64,
}

impl Seeds {
    /// Distinct seeds derived from one base value.
    pub fn from_base(base: u64) -> Self {
        let at = |k: u64| base.wrapping_mul(1000).wrapping_add(k);
        Self {
            scenario: at(1),
            eval_scenario: at(2),
            split: at(3),
            point: at(4),
            quantile: at(5),
            pairs: at(6),
            forest: at(7),
            avoidance: at(8),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub forest: ForestConfig,
    /// Negatives kept per positive when building the training set; `None` keeps all.
    pub negative_ratio: Option<f64>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            forest: ForestConfig::default(),
            negative_ratio: Some(20.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub seeds: Seeds,
    pub point: PointModelConfig,
    pub quantile: QuantileModelConfig,
    pub kalman: KalmanConfig,
    pub k_epsilon_mode: KMode,
    pub classifier: ClassifierConfig,
    pub detector: DetectionConfig,
    pub ci_cws: CiCwsConfig,
    /// Omit to skip the braking evaluation.
    pub avoidance: Option<AvoidanceConfig>,
    pub render: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            seeds: Seeds::default(),
            point: PointModelConfig::default(),
            quantile: QuantileModelConfig::default(),
            kalman: KalmanConfig::default(),
            k_epsilon_mode: KMode::default(),
            classifier: ClassifierConfig::default(),
            detector: DetectionConfig::default(),
            ci_cws: CiCwsConfig::default(),
            avoidance: Some(AvoidanceConfig::default()),
            render: true,
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Read a config file; relative data paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.data.scenario_path);
        resolve(base, &mut cfg.data.trace_path);
        resolve(base, &mut cfg.data.eval_trace_path);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.scenario_path.is_none() && d.scenario.is_none() && d.trace_path.is_none() {
            return Err(Error::config("experiment needs a scenario or a trace"));
        }
        if d.eval_trace_path.is_some() && d.trace_path.is_none() {
            return Err(Error::config("eval_trace_path requires trace_path"));
        }
        for p in [&d.scenario_path, &d.trace_path, &d.eval_trace_path].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::config(format!("{} does not exist", p.display())));
            }
        }
        if d.input_ticks == 0 || d.horizon == 0 || d.train_stride == 0 {
            return Err(Error::config("input_ticks, horizon and train_stride must be positive"));
        }
        if d.train_duration_s.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::config("train_duration_s must be positive"));
        }
        d.split.validate()?;
        self.quantile.validate()?;
        if let Some(a) = &self.avoidance {
            a.validate()?;
        }
        Ok(())
    }

    /// sha256 of the config with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// File layout of one experiment directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn trace(&self, which: &str) -> PathBuf {
        self.0.join("traces").join(format!("{which}.csv"))
    }
    pub fn trace_meta(&self) -> PathBuf {
        self.0.join("traces").join("meta.json")
    }
    pub fn collisions(&self, which: &str) -> PathBuf {
        self.0.join("traces").join(format!("{which}_collisions.json"))
    }
    pub fn dataset(&self) -> PathBuf {
        self.0.join("dataset")
    }
    pub fn point_model(&self) -> PathBuf {
        self.0.join("models").join("point")
    }
    pub fn quantile_model(&self, axis: Axis2) -> PathBuf {
        let name = match axis {
            Axis2::Lat => "quantile_lat",
            Axis2::Lon => "quantile_lon",
        };
        self.0.join("models").join(name)
    }
    pub fn forest(&self) -> PathBuf {
        self.0.join("models").join("forest")
    }
    pub fn pairs(&self) -> PathBuf {
        self.0.join("pairs").join("train.bin")
    }
    pub fn thresholds(&self) -> PathBuf {
        self.0.join("pairs").join("thresholds.json")
    }
    pub fn detection_log(&self, method: Method) -> PathBuf {
        self.0.join("detections").join(format!("{}.jsonl", method.name()))
    }
    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.json")
    }
    pub fn reports(&self) -> PathBuf {
        self.0.join("reports")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_sorted_json(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Pretty JSON with object keys in lexicographic order.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone)]
pub struct Traces {
    pub train: Trace,
    pub eval: Trace,
}

fn scenario_config(data: &DataConfig) -> Result<Option<ScenarioConfig>> {
    if let Some(p) = &data.scenario_path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        return ScenarioConfig::from_toml(&text).map(Some);
    }
    Ok(data.scenario.clone())
}

/// Generate or ingest the training and evaluation traces.
pub fn load_traces(cfg: &ExperimentConfig) -> Result<Traces> {
    cfg.validate()?;
    let data = &cfg.data;
    if let Some(path) = &data.trace_path {
        let layout = data.layout.build()?;
        let train = with_tick(load_trace_csv(path, layout.clone())?, data.tick_s);
        let eval = match &data.eval_trace_path {
            Some(p) => with_tick(load_trace_csv(p, layout)?, data.tick_s),
            None => {
                warn!("no evaluation trace given; detection runs on the training trace");
                train.clone()
            }
        };
        return Ok(Traces { train, eval });
    }
    let scenario = scenario_config(data)?.expect("validated");
    let train_scenario = ScenarioConfig {
        duration_s: data.train_duration_s.unwrap_or(scenario.duration_s),
        ..scenario.clone()
    };
    Ok(Traces {
        train: generate_scenario(&train_scenario, cfg.seeds.scenario)?,
        eval: generate_scenario(&scenario, cfg.seeds.eval_scenario)?,
    })
}

fn with_tick(mut t: Trace, tick: f64) -> Trace {
    t.meta.tick = tick;
    t
}

/// Save a trace CSV plus the layout sidecar needed to read it back.
pub fn save_trace(dir: &RunDir, which: &str, trace: &Trace) -> Result<()> {
    let path = dir.trace(which);
    ensure_dir(path.parent().expect("nested"))?;
    trace.save_csv(&path)?;
    write_json(&dir.trace_meta(), &trace.meta)
}

pub fn load_saved_trace(dir: &RunDir, which: &str) -> Result<Trace> {
    let meta: crate::world::trace::TraceMeta = read_json(&dir.trace_meta())?;
    let t = load_trace_csv(&dir.trace(which), meta.layout)?;
    Ok(with_tick(t, meta.tick))
}

/// Windows, vehicle split, scaling, then striding of the train and validation windows.
pub fn prepare_dataset(trace: &Trace, data: &DataConfig, seed: u64) -> Result<PreparedDataset> {
    let layout = FeatureLayout::for_trace(trace);
    let samples = build_sequences(trace, data.input_ticks, data.horizon)?;
    let ids: BTreeSet<VehicleId> = trace.vehicles.keys().copied().collect();
    let colliding: Vec<_> = detect_ground_truth_collisions(trace).iter().map(|c| c.pair).collect();
    let assignment = split_vehicles(&ids, &colliding, data.split, seed)?;
    let (train, val, test) = split_dataset(samples, &assignment);
    let stride = |v: Vec<SequenceSample>| -> Vec<SequenceSample> { v.into_iter().step_by(data.train_stride).collect() };
    let (train, val) = (stride(train), stride(val));
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::config(format!(
            "split left an empty partition ({} / {} / {} windows)",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    let (scaler, train, mut others) = fit_and_apply_scaler(train, vec![val, test], &layout)?;
    let test = others.pop().expect("two others");
    let val = others.pop().expect("two others");
    Ok(PreparedDataset {
        meta: DatasetMeta {
            feature_names: layout.names(),
            layout,
            scaler,
            input_ticks: data.input_ticks,
            horizon: data.horizon,
            tick_s: trace.tick(),
            split_seed: seed,
            assignment,
            counts: [train.len(), val.len(), test.len()],
        },
        train,
        val,
        test,
    })
}

pub fn train_point(ds: &PreparedDataset, cfg: &PointModelConfig, seed: u64) -> Result<PointModel> {
    PointModel::train(&ds.train, &ds.val, cfg, &ds.meta.scaler, seed)
}

pub fn train_quantile(ds: &PreparedDataset, axis: Axis2, cfg: &QuantileModelConfig, seed: u64) -> Result<QuantileModel> {
    let seed = match axis {
        Axis2::Lat => seed,
        Axis2::Lon => seed.wrapping_add(1),
    };
    QuantileModel::train(axis, &ds.train, &ds.val, cfg, &ds.meta.scaler, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorErrors {
    pub model: ErrorReport,
    pub kalman: ErrorReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorEvaluation {
    pub errors: PredictorErrors,
    pub coverage: CoverageReport,
}

/// Point and interval quality on the held-out windows, with the Kalman baseline.
pub fn evaluate_predictors(
    ds: &PreparedDataset,
    point: &PointModel,
    intervals: &IntervalModels,
    kalman: &KalmanConfig,
) -> Result<PredictorEvaluation> {
    let test = &ds.test;
    let inputs = stack_inputs(test)?;
    let preds = point.predict_batch(inputs.view())?;
    let preds: Vec<Array2<f64>> = (0..test.len()).map(|i| preds.slice(s![i, .., ..]).to_owned()).collect();
    let truths: Vec<Array2<f64>> = test.iter().map(|s| s.target.clone()).collect();
    let turning: Vec<bool> = test.iter().map(|s| s.turning).collect();
    let horizon = point.horizon();
    let steps: Vec<usize> = REPORT_STEPS.iter().copied().filter(|&k| k <= horizon).collect();
    let kf: Vec<Array2<f64>> = test
        .iter()
        .map(|s| kf_predict_window(s.input.view(), &ds.meta.scaler, ds.meta.tick_s, horizon, kalman))
        .collect::<Result<_>>()?;
    let bands = intervals.predict_batch(inputs.view())?;
    Ok(PredictorEvaluation {
        errors: PredictorErrors {
            model: evaluate_ed(&preds, &truths, &turning, &steps)?,
            kalman: evaluate_ed(&kf, &truths, &turning, &steps)?,
        },
        coverage: evaluate_coverage(&bands, &truths, &steps)?,
    })
}

pub fn forecaster<'a>(
    ds_meta: &'a DatasetMeta,
    point: &'a PointModel,
    intervals: &'a IntervalModels,
    mode: KMode,
) -> Result<Forecaster<'a>> {
    Ok(Forecaster {
        point,
        intervals,
        scaler: &ds_meta.scaler,
        input_ticks: ds_meta.input_ticks,
        k_epsilon: k_epsilon(intervals.lat.lower, intervals.lat.upper, mode)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSummary {
    pub samples: usize,
    pub positives: usize,
    pub kept: usize,
    pub kept_positives: usize,
}

/// Thresholds from the training collisions, then the labelled pair set.
pub fn build_pairs(
    trace: &Trace,
    forecasts: &ForecastTable,
    collisions: &[CollisionEvent],
    cfg: &ExperimentConfig,
) -> Result<(PairDataset, DistanceThresholds, PairSummary)> {
    let colliding: Vec<_> = collisions.iter().map(|c| c.pair).collect();
    let thresholds = compute_distance_thresholds(trace, &colliding)?;
    let all = PairDataset::build(trace, forecasts, collisions, &thresholds, cfg.detector.gating_radius)?;
    let kept = match cfg.classifier.negative_ratio {
        Some(r) => all.subsample_negatives(r, cfg.seeds.pairs),
        None => all.clone(),
    };
    let summary = PairSummary {
        samples: all.len(),
        positives: all.positives(),
        kept: kept.len(),
        kept_positives: kept.positives(),
    };
    Ok((kept, thresholds, summary))
}

pub fn train_forest(pairs: &PairDataset, cfg: &ForestConfig, seed: u64) -> Result<Forest> {
    Forest::train(pairs.samples()?, cfg, seed)
}

/// The forest detector and both baselines on one trace.
pub fn detect_all(
    trace: &Trace,
    forecasts: &ForecastTable,
    forest: &Forest,
    thresholds: &DistanceThresholds,
    cfg: &ExperimentConfig,
) -> Result<Vec<DetectionLog>> {
    Ok(vec![
        run_detection(trace, forecasts, forest, &cfg.detector)?,
        run_relative_distance(trace, forecasts, thresholds.distance, &cfg.detector)?,
        run_ci_cws(trace, forecasts, &cfg.ci_cws, &cfg.detector)?,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub vehicles: usize,
    pub states: usize,
    pub collisions: usize,
    pub turning_fraction: f64,
}

impl TraceSummary {
    pub fn of(trace: &Trace, collisions: &[CollisionEvent]) -> Self {
        let n = trace.vehicles.len();
        let turning = trace.vehicles.keys().filter(|id| trace.is_turning(**id)).count();
        Self {
            vehicles: n,
            states: trace.state_count(),
            collisions: collisions.len(),
            turning_fraction: if n == 0 { 0.0 } else { turning as f64 / n as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train_trace: TraceSummary,
    pub eval_trace: TraceSummary,
    /// Windows in train, validation and test.
    pub windows: [usize; 3],
    pub test_turning_fraction: f64,
    pub k_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub grouped: BTreeMap<String, f64>,
    pub per_feature: BTreeMap<String, f64>,
}

impl Importance {
    pub fn of(forest: &Forest, horizon: usize) -> Self {
        Self {
            grouped: grouped_importance(forest),
            per_feature: feature_names(horizon).into_iter().zip(forest.importance.iter().copied()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotVehicle {
    pub id: VehicleId,
    /// Observed (y, x) positions up to the alarm tick.
    pub history: Vec<[f64; 2]>,
    /// Recorded (y, x) positions after the alarm tick, as far as the trace goes.
    pub truth: Vec<[f64; 2]>,
    pub predicted: Vec<[f64; 2]>,
    /// Full interval widths (lat, lon) per future step.
    pub interval_widths: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub method: Method,
    pub tick: i64,
    pub time: f64,
    pub vehicles: Vec<SnapshotVehicle>,
}

/// Scene around the first alarm of a truly colliding pair.
pub fn snapshot(
    trace: &Trace,
    forecasts: &ForecastTable,
    log: &DetectionLog,
    collisions: &[CollisionEvent],
    input_ticks: usize,
) -> Option<Snapshot> {
    let colliding: BTreeSet<_> = collisions.iter().map(|c| c.pair).collect();
    let alarm = log.alarms.iter().find(|a| colliding.contains(&a.pair))?;
    let mut vehicles = Vec::new();
    for id in [alarm.pair.0, alarm.pair.1] {
        let f = forecasts.get(alarm.tick, id)?;
        let states = trace.vehicles.get(&id)?;
        let now = states.iter().position(|s| tick_index(s.time, trace.tick()) == alarm.tick)?;
        let yx = |s: &crate::world::VehicleState| [s.position.y, s.position.x];
        let from = (now + 1).saturating_sub(input_ticks);
        vehicles.push(SnapshotVehicle {
            id,
            history: states[from..=now].iter().map(yx).collect(),
            truth: states[now + 1..].iter().take(forecasts.horizon).map(yx).collect(),
            predicted: f.point.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
            interval_widths: (0..f.interval.len()).map(|j| f.interval.widths(j)).collect(),
        });
    }
    Some(Snapshot {
        method: log.method,
        tick: alarm.tick,
        time: alarm.time,
        vehicles,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub config_hash: String,
    pub data: Option<DataSummary>,
    pub training: BTreeMap<String, TrainHistory>,
    pub errors: Option<PredictorErrors>,
    pub coverage: Option<CoverageReport>,
    pub thresholds: Option<DistanceThresholds>,
    pub pairs: Option<PairSummary>,
    pub detection: BTreeMap<String, DetectionMetrics>,
    pub avoidance: Option<AvoidanceReport>,
    pub importance: Option<Importance>,
    pub snapshot: Option<Snapshot>,
}

impl MetricsBundle {
    pub fn is_empty(&self) -> bool {
        self.data.is_none()
            && self.errors.is_none()
            && self.coverage.is_none()
            && self.detection.is_empty()
            && self.avoidance.is_none()
            && self.importance.is_none()
            && self.snapshot.is_none()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Everything one run produced, kept in memory for callers that want more
/// than the bundle.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub bundle: MetricsBundle,
    pub traces: Traces,
    pub collisions: [Vec<CollisionEvent>; 2],
    pub dataset: PreparedDataset,
    pub point: PointModel,
    pub intervals: IntervalModels,
    pub forest: Forest,
    pub thresholds: DistanceThresholds,
    pub eval_forecasts: ForecastTable,
    pub logs: Vec<DetectionLog>,
    pub reports: Option<ReportFiles>,
}

/// Run every stage in order, persisting artifacts under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate().stage("config")?;
    let dir = RunDir(cfg.out_dir.clone());
    ensure_dir(&dir.0).stage("config")?;
    write_json(&dir.0.join("config.json"), cfg).stage("config")?;
    let mut bundle = MetricsBundle {
        config_hash: cfg.hash(),
        ..Default::default()
    };

    let traces = load_traces(cfg).stage("generate")?;
    let train_collisions = detect_ground_truth_collisions(&traces.train);
    let eval_collisions = detect_ground_truth_collisions(&traces.eval);
    save_trace(&dir, "train", &traces.train).stage("generate")?;
    save_trace(&dir, "eval", &traces.eval).stage("generate")?;
    write_json(&dir.collisions("train"), &train_collisions).stage("generate")?;
    write_json(&dir.collisions("eval"), &eval_collisions).stage("generate")?;
    info!(
        "traces: train {} vehicles / {} collisions, eval {} vehicles / {} collisions",
        traces.train.vehicles.len(),
        train_collisions.len(),
        traces.eval.vehicles.len(),
        eval_collisions.len()
    );

    let dataset = prepare_dataset(&traces.train, &cfg.data, cfg.seeds.split).stage("prepare")?;
    dataset.save(&dir.dataset()).stage("prepare")?;
    info!("windows: {:?}", dataset.meta.counts);

    let point = train_point(&dataset, &cfg.point, cfg.seeds.point).stage("train-point")?;
    point.save(&dir.point_model()).stage("train-point")?;
    let lat = train_quantile(&dataset, Axis2::Lat, &cfg.quantile, cfg.seeds.quantile).stage("train-quantile")?;
    lat.save(&dir.quantile_model(Axis2::Lat)).stage("train-quantile")?;
    let lon = train_quantile(&dataset, Axis2::Lon, &cfg.quantile, cfg.seeds.quantile).stage("train-quantile")?;
    lon.save(&dir.quantile_model(Axis2::Lon)).stage("train-quantile")?;
    bundle.training.insert("point".into(), point.0.history.clone());
    bundle.training.insert("quantile_lat".into(), lat.net.history.clone());
    bundle.training.insert("quantile_lon".into(), lon.net.history.clone());
    let intervals = IntervalModels::new(lat, lon).stage("train-quantile")?;

    let eval = evaluate_predictors(&dataset, &point, &intervals, &cfg.kalman).stage("evaluate")?;
    bundle.errors = Some(eval.errors);
    bundle.coverage = Some(eval.coverage);

    let fc = forecaster(&dataset.meta, &point, &intervals, cfg.k_epsilon_mode).stage("forecast")?;
    let test_ids = &dataset.meta.assignment.test;
    let test_turning = test_ids.iter().filter(|id| traces.train.is_turning(**id)).count();
    bundle.data = Some(DataSummary {
        train_trace: TraceSummary::of(&traces.train, &train_collisions),
        eval_trace: TraceSummary::of(&traces.eval, &eval_collisions),
        windows: dataset.meta.counts,
        test_turning_fraction: if test_ids.is_empty() { 0.0 } else { test_turning as f64 / test_ids.len() as f64 },
        k_epsilon: fc.k_epsilon,
    });
    let train_forecasts = fc.forecast_trace(&traces.train).stage("forecast")?;
    let eval_forecasts = fc.forecast_trace(&traces.eval).stage("forecast")?;

    let (pairs, thresholds, summary) = build_pairs(&traces.train, &train_forecasts, &train_collisions, cfg).stage("pairs")?;
    drop(train_forecasts);
    pairs.save(&dir.pairs()).stage("pairs")?;
    write_json(&dir.thresholds(), &thresholds).stage("pairs")?;
    info!("pairs: {summary:?}, d_c {:.3} m", thresholds.distance);
    bundle.thresholds = Some(thresholds.clone());
    bundle.pairs = Some(summary);

    let forest = train_forest(&pairs, &cfg.classifier.forest, cfg.seeds.forest).stage("train-rfc")?;
    drop(pairs);
    save_forest(&dir.forest(), &forest, &thresholds).stage("train-rfc")?;
    bundle.importance = Some(Importance::of(&forest, dataset.meta.horizon));

    let logs = detect_all(&traces.eval, &eval_forecasts, &forest, &thresholds, cfg).stage("detect")?;
    for log in &logs {
        log.save(&dir.detection_log(log.method)).stage("detect")?;
        let m = score_detection(log, &eval_collisions, &traces.eval);
        info!(
            "{}: TP {} FP {} FN {}",
            log.method.name(),
            m.true_positives,
            m.false_positives,
            m.false_negatives
        );
        bundle.detection.insert(log.method.name().to_string(), m);
    }
    bundle.snapshot = snapshot(&traces.eval, &eval_forecasts, &logs[0], &eval_collisions, dataset.meta.input_ticks);

    if let Some(av) = &cfg.avoidance {
        bundle.avoidance =
            Some(evaluate_avoidance(&traces.eval, &eval_collisions, &logs[0], av, cfg.seeds.avoidance).stage("avoid")?);
    }

    bundle.save(&dir.metrics()).stage("persist")?;
    let reports = if cfg.render {
        Some(render_reports(&bundle, &dir.reports()).stage("report")?)
    } else {
        None
    };
    Ok(ExperimentOutput {
        bundle,
        traces,
        collisions: [train_collisions, eval_collisions],
        dataset,
        point,
        intervals,
        forest,
        thresholds,
        eval_forecasts,
        logs,
        reports,
    })
}

/// Reload trained models from a run directory.
pub fn load_models(dir: &RunDir) -> Result<(PointModel, IntervalModels, Forest, DistanceThresholds)> {
    let point = PointModel::load(&dir.point_model())?;
    let lat = QuantileModel::load(&dir.quantile_model(Axis2::Lat))?;
    let lon = QuantileModel::load(&dir.quantile_model(Axis2::Lon))?;
    let (forest, thresholds) = load_forest(&dir.forest())?;
    Ok((point, IntervalModels::new(lat, lon)?, forest, thresholds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_without_inputs_is_rejected() {
        let cfg = ExperimentConfig::default();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(matches!(run_experiment(&cfg), Err(Error::Stage { stage: "config", .. })));
    }

    #[test]
    fn missing_paths_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.trace_path = Some(PathBuf::from("/nonexistent/trace.csv"));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip_and_hash_ignores_out_dir() {
        let text = r#"
            out_dir = "a"
            k_epsilon_mode = "literal"
            [data.scenario]
            duration_s = 60.0
            injected_collisions = 2
            [seeds]
            forest = 11
            [point]
            hidden_units = 8
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.k_epsilon_mode, KMode::Literal);
        assert_eq!(cfg.seeds.forest, 11);
        assert_eq!(cfg.seeds.split, Seeds::default().split);
        assert_eq!(cfg.point.hidden_units, 8);
        assert!(cfg.validate().is_ok());
        let mut other = cfg.clone();
        other.out_dir = PathBuf::from("b");
        assert_eq!(cfg.hash(), other.hash());
        other.seeds.forest = 12;
        assert_ne!(cfg.hash(), other.hash());
        let back = ExperimentConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let s = Seeds::from_base(7);
        let v = [s.scenario, s.eval_scenario, s.split, s.point, s.quantile, s.pairs, s.forest, s.avoidance];
        let set: BTreeSet<_> = v.iter().collect();
        assert_eq!(set.len(), v.len());
    }

    #[test]
    fn sorted_json_orders_keys() {
        let mut m = std::collections::HashMap::new();
        m.insert("b", 1);
        m.insert("a", 2);
        let s = to_sorted_json(&m).unwrap();
        assert!(s.find("\"a\"").unwrap() < s.find("\"b\"").unwrap());
    }
}
