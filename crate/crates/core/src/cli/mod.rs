//! Experiment runner behind the `featureflow` binary: latency × mode sweeps,
//! estimator training, codec benchmarks and offline re-scoring.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    ChannelSection, EstimatorInit, ExperimentConfig, FlowSection, GridExtent, GridSection, ScenarioSection,
};

use crate::codec::{
    attention_mask, decode_packet, encode_packet, spatial_compress, PacketOptions, BYTES_PER_BOX, BYTES_PER_POINT,
};
use crate::error::{Error, Result};
use crate::featurizer::rasterize;
use crate::flow::{
    estimate_derivative, make_pairs, mean_loss, train_prepared, EstimatorParams, FeatureFlow, PreparedPair, TimedCloud,
    TrainLog,
};
use crate::fusion::{align, detect, run_mode, FusionMode, RunOutput};
use crate::geometry::Box3D;
use crate::metrics::{evaluate_run, EvalConfig, EvalFrame, EvalResult, IouMode, MapEntry};
use crate::scene::{Scenario, SensorRole};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_RUNTIME,
    }
}

pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: FusionMode,
    pub latency_ms: f64,
    pub map: Vec<MapEntry>,
    pub ab_bytes: f64,
    /// Infrastructure packets the vehicle had to keep.
    pub storage_counter: usize,
    /// Derivative estimations run on the vehicle.
    pub compute_counter: usize,
    /// Classes scored with AP 0 because they had no ground truth.
    pub classes_without_ground_truth: Vec<u32>,
}

impl ReportRow {
    pub fn map_for(&self, mode: IouMode, threshold: f64) -> Option<f64> {
        self.map
            .iter()
            .find(|m| m.mode == mode && m.threshold == threshold)
            .map(|m| m.map)
    }
}

/// mAP of the flow mode minus the no-prediction mode at one latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBenefit {
    pub latency_ms: f64,
    pub metric: String,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub prediction_benefit: Vec<PredictionBenefit>,
}

impl Report {
    pub fn row(&self, mode: FusionMode, latency_ms: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.mode == mode && r.latency_ms == latency_ms)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,latency_ms");
        let columns: Vec<(IouMode, f64)> = self
            .rows
            .first()
            .map_or(Vec::new(), |r| r.map.iter().map(|m| (m.mode, m.threshold)).collect());
        for (mode, t) in &columns {
            let _ = write!(out, ",map_{}@{}", mode.name(), t);
        }
        out.push_str(",ab_bytes,scc,ccc\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.mode.name(), r.latency_ms);
            for m in &r.map {
                let _ = write!(out, ",{}", m.map);
            }
            let _ = writeln!(out, ",{},{},{}", r.ab_bytes, r.storage_counter, r.compute_counter);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Ground truth and detections of a run, ready for scoring.
pub fn eval_frames(run: &RunOutput) -> Vec<EvalFrame> {
    run.frames
        .iter()
        .map(|f| EvalFrame {
            predictions: f.detections.clone(),
            ground_truth: f.ground_truth.clone(),
        })
        .collect()
}

pub fn score_run(run: &RunOutput, latency_ms: f64, eval: &EvalConfig) -> Result<ReportRow> {
    let result = evaluate_run(&eval_frames(run), eval, &run.ab_log())?;
    let mut no_gt: Vec<u32> = result
        .ap
        .iter()
        .filter(|a| a.no_ground_truth)
        .map(|a| a.class_id)
        .collect();
    no_gt.dedup();
    Ok(ReportRow {
        mode: run.mode,
        latency_ms,
        map: result.map,
        ab_bytes: result.ab_mean,
        storage_counter: run.storage_counter,
        compute_counter: run.compute_counter,
        classes_without_ground_truth: no_gt,
    })
}

/// One row per (mode, latency), modes outermost, in config order.
pub fn simulate(cfg: &ExperimentConfig, theta: &EstimatorParams) -> Result<Vec<ReportRow>> {
    let scenario = cfg.scenario();
    let pipeline = cfg.pipeline();
    let cells: Vec<(FusionMode, f64)> = cfg
        .modes
        .iter()
        .flat_map(|&m| cfg.channel.latencies_ms.iter().map(move |&l| (m, l)))
        .collect();
    cells
        .par_iter()
        .map(|&(mode, latency_ms)| {
            let run = run_mode(mode, &scenario, &cfg.link(latency_ms), theta, &pipeline)?;
            score_run(&run, latency_ms, &cfg.eval)
        })
        .collect()
}

fn prediction_benefit(rows: &[ReportRow], eval: &EvalConfig) -> Vec<PredictionBenefit> {
    let (mode, threshold) = if eval.modes.contains(&IouMode::Bev) && eval.iou_thresholds.contains(&0.5) {
        (IouMode::Bev, 0.5)
    } else {
        (eval.modes[0], eval.iou_thresholds[0])
    };
    let find = |m: FusionMode, l: f64| rows.iter().find(|r| r.mode == m && r.latency_ms == l);
    let mut latencies: Vec<f64> = rows.iter().map(|r| r.latency_ms).filter(|&l| l >= 200.0).collect();
    latencies.sort_by(f64::total_cmp);
    latencies.dedup();
    latencies
        .into_iter()
        .filter_map(|l| {
            let flow = find(FusionMode::MiddleFlowInfra, l)?.map_for(mode, threshold)?;
            let stale = find(FusionMode::MiddleNoPrediction, l)?.map_for(mode, threshold)?;
            Some(PredictionBenefit {
                latency_ms: l,
                metric: format!("map_{}@{}", mode.name(), threshold),
                gap: flow - stale,
            })
        })
        .collect()
}

pub fn build_report(cfg: &ExperimentConfig, config_bytes: &[u8], rows: Vec<ReportRow>) -> Report {
    Report {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.scenario.seed,
        config_hash: config_hash(config_bytes),
        config: cfg.clone(),
        prediction_benefit: prediction_benefit(&rows, &cfg.eval),
        rows,
    }
}

/// Runs the sweep and writes `report.csv` and `report.json` into `out_dir`.
pub fn cmd_simulate(config_path: &Path, out_dir: &Path) -> Result<Report> {
    let (cfg, bytes) = ExperimentConfig::load(config_path)?;
    let theta = cfg.estimator()?;
    let report = build_report(&cfg, &bytes, simulate(&cfg, &theta)?);
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.csv"), report.to_csv())?;
    std::fs::write(out_dir.join("report.json"), report.to_json()?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub params: EstimatorParams,
    pub training: Option<TrainSummary>,
}

pub fn load_params(path: &Path) -> Result<EstimatorParams> {
    let text = std::fs::read_to_string(path)?;
    let file: ParamsFile = serde_json::from_str(&text)?;
    file.params.validate()?;
    Ok(file.params)
}

pub fn save_params(path: &Path, file: &ParamsFile) -> Result<()> {
    let mut s = serde_json::to_string_pretty(file)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Roadside frames only: the vehicle sensor is never sampled.
pub fn infra_sequence(scenario: &Scenario) -> Result<Vec<TimedCloud>> {
    (0..scenario.num_frames)
        .map(|i| {
            let t_us = scenario.frame_time_us(i);
            let (cloud, _) = scenario.sample_frame(SensorRole::Infrastructure, t_us as f64 * 1e-6)?;
            Ok(TimedCloud { cloud, t_us })
        })
        .collect()
}

pub fn prepared_pairs(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<Vec<PreparedPair>> {
    let frames = infra_sequence(scenario)?;
    let grid = cfg.grid.infra.grid();
    make_pairs(&frames, cfg.flow.k_min, cfg.flow.k_max, scenario.seed)?
        .par_iter()
        .map(|p| p.prepare(|c| rasterize(c, &grid)))
        .collect()
}

pub fn train_flow(cfg: &ExperimentConfig) -> Result<ParamsFile> {
    let train = prepared_pairs(cfg, &cfg.scenario())?;
    let heldout = prepared_pairs(cfg, &cfg.holdout_scenario())?;
    let theta0 = cfg.initial_params();
    let initial_train_loss = mean_loss(&theta0, &train)?;
    let initial_heldout_loss = mean_loss(&theta0, &heldout)?;
    let (params, log) = train_prepared(&theta0, &train, &cfg.train_config())?;
    Ok(ParamsFile {
        training: Some(TrainSummary {
            train_pairs: train.len(),
            heldout_pairs: heldout.len(),
            initial_train_loss,
            final_train_loss: mean_loss(&params, &train)?,
            initial_heldout_loss,
            final_heldout_loss: mean_loss(&params, &heldout)?,
            log,
        }),
        params,
    })
}

pub fn cmd_train_flow(config_path: &Path, out_path: &Path) -> Result<ParamsFile> {
    let (cfg, _) = ExperimentConfig::load(config_path)?;
    let file = train_flow(&cfg)?;
    save_params(out_path, &file)?;
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Average Byte of one frame for each configured mode.
    pub packet_bytes: BTreeMap<String, usize>,
    pub unmasked_flow_bytes: usize,
    pub masked_flow_bytes: usize,
    pub mask_bytes: usize,
    pub encode_bytes_per_s: f64,
    pub decode_bytes_per_s: f64,
    pub rasterize_cells_per_s: f64,
    pub align_cells_per_s: f64,
}

fn rate(amount: usize, reps: usize, start: Instant) -> f64 {
    (amount * reps) as f64 / start.elapsed().as_secs_f64().max(1e-9)
}

pub fn bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    const REPS: usize = 5;
    let scenario = cfg.scenario();
    let pipeline = cfg.pipeline();
    let codec = pipeline.codec;
    let theta = cfg.estimator()?;
    let infra_grid = pipeline.infra_grid;
    let t1 = scenario.frame_time_us(1);
    let (c0, _) = scenario.sample_frame(SensorRole::Infrastructure, 0.0)?;
    let (c1, _) = scenario.sample_frame(SensorRole::Infrastructure, t1 as f64 * 1e-6)?;

    let start = Instant::now();
    let mut f1 = rasterize(&c1, &infra_grid)?;
    for _ in 1..REPS {
        f1 = rasterize(&c1, &infra_grid)?;
    }
    let rasterize_cells_per_s = rate(infra_grid.height() * infra_grid.width(), REPS, start);
    let f0 = rasterize(&c0, &infra_grid)?;

    let compress = |f| spatial_compress(f, codec.spatial_factor, codec.channel_group);
    let deriv = estimate_derivative(&theta, &f0, &f1, scenario.frame_period_s())?;
    let (p0, p1) = (compress(&f0)?, compress(&f1)?);
    let flow = FeatureFlow::new(p1.clone(), compress(&deriv)?, t1)?;
    let pose = scenario.infra.pose;
    let unmasked = PacketOptions {
        bits: codec.bits,
        mask: None,
        include_derivative: true,
    };
    let (_, h, w) = p1.dims();
    let s = codec.mask_stride.max(1);
    let mask = attention_mask(&p0, &p1, (h / s, w / s), codec.mask_threshold)?;
    let mask_bytes = mask.byte_len();
    let masked = PacketOptions {
        mask: Some(mask),
        ..unmasked.clone()
    };
    let base_only = PacketOptions {
        include_derivative: false,
        ..unmasked.clone()
    };

    let start = Instant::now();
    let mut packet = encode_packet(&flow, &pose, &unmasked)?;
    for _ in 1..REPS {
        packet = encode_packet(&flow, &pose, &unmasked)?;
    }
    let encode_bytes_per_s = rate(packet.bytes.len(), REPS, start);
    let start = Instant::now();
    for _ in 0..REPS {
        decode_packet(&packet.bytes)?;
    }
    let decode_bytes_per_s = rate(packet.bytes.len(), REPS, start);
    let masked_packet = encode_packet(&flow, &pose, &masked)?;

    let ego_grid = pipeline.ego_grid;
    let start = Instant::now();
    for _ in 0..REPS {
        align(&f1, &pose, &scenario.ego_pose(0.0), &ego_grid);
    }
    let align_cells_per_s = rate(ego_grid.height() * ego_grid.width(), REPS, start);

    let flow_packet = if codec.use_mask { &masked_packet } else { &packet };
    let mut packet_bytes = BTreeMap::new();
    for &mode in &cfg.modes {
        let bytes = match mode {
            FusionMode::EarlyFusion => c1.len() * BYTES_PER_POINT,
            FusionMode::LateFusion => detect(&f1, &pipeline.detector).len() * BYTES_PER_BOX,
            FusionMode::MiddleNoPrediction | FusionMode::MiddleFlowVehicle => {
                encode_packet(&FeatureFlow::stationary(p1.clone(), t1), &pose, &base_only)?.ab_bytes
            }
            FusionMode::MiddleFlowInfra => flow_packet.ab_bytes,
        };
        packet_bytes.insert(mode.name().to_string(), bytes);
    }

    Ok(BenchReport {
        packet_bytes,
        unmasked_flow_bytes: packet.ab_bytes,
        masked_flow_bytes: masked_packet.ab_bytes,
        mask_bytes,
        encode_bytes_per_s,
        decode_bytes_per_s,
        rasterize_cells_per_s,
        align_cells_per_s,
    })
}

pub fn cmd_bench(config_path: &Path) -> Result<BenchReport> {
    let (cfg, _) = ExperimentConfig::load(config_path)?;
    bench(&cfg)
}

/// One line of a prediction or ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub timestamp_us: u64,
    pub boxes: Vec<Box3D>,
}

pub fn read_frames(path: &Path) -> Result<Vec<FrameRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Decode(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn write_frames(path: &Path, frames: &[FrameRecord]) -> Result<()> {
    let mut out = String::new();
    for f in frames {
        out.push_str(&serde_json::to_string(f)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Detections and ground truth of a run as interchange records.
pub fn run_records(run: &RunOutput) -> (Vec<FrameRecord>, Vec<FrameRecord>) {
    run.frames
        .iter()
        .map(|f| {
            let rec = |boxes: &Vec<Box3D>| FrameRecord {
                frame_id: f.frame as u64,
                timestamp_us: f.t_vehicle_us,
                boxes: boxes.clone(),
            };
            (rec(&f.detections), rec(&f.ground_truth))
        })
        .unzip()
}

/// Pairs frames by id; a frame missing on one side counts as empty there.
pub fn pair_records(preds: &[FrameRecord], gts: &[FrameRecord]) -> Result<Vec<EvalFrame>> {
    let mut frames: BTreeMap<u64, EvalFrame> = BTreeMap::new();
    for (records, is_pred) in [(preds, true), (gts, false)] {
        let mut seen = std::collections::BTreeSet::new();
        for r in records {
            if !seen.insert(r.frame_id) {
                return Err(Error::Decode(format!("frame {} listed twice", r.frame_id)));
            }
            let slot = frames.entry(r.frame_id).or_default();
            if is_pred {
                slot.predictions = r.boxes.clone();
            } else {
                slot.ground_truth = r.boxes.clone();
            }
        }
    }
    Ok(frames.into_values().collect())
}

pub fn cmd_eval(pred_path: &Path, gt_path: &Path, config_path: &Path) -> Result<EvalResult> {
    let (cfg, _) = ExperimentConfig::load(config_path)?;
    let frames = pair_records(&read_frames(pred_path)?, &read_frames(gt_path)?)?;
    evaluate_run(&frames, &cfg.eval, &[])
}
