//! Experiment configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::LatencyLink;
use crate::error::{Error, Result};
use crate::featurizer::{GridConfig, RASTER_CHANNELS};
use crate::flow::{EstimatorParams, TrainConfig};
use crate::fusion::{CodecConfig, DetectorConfig, FusionMode, PipelineConfig};
use crate::geometry::Pose2;
use crate::metrics::EvalConfig;
use crate::rng::derive_seed;
use crate::scene::{Scenario, SensorSpec, TrafficSpec, Trajectory, DEFAULT_MAX_SPEED};

const TAG_HOLDOUT: u64 = 0x484F_4C44;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modes: Vec<FusionMode>,
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub seed: u64,
    pub num_frames: usize,
    #[serde(default = "default_ground_z")]
    pub ground_z: f64,
    #[serde(default = "default_max_speed")]
    pub max_speed: f64,
    #[serde(default)]
    pub traffic: TrafficSpec,
    pub infra: SensorSpec,
    pub vehicle: SensorSpec,
    /// World pose of the vehicle body at t = 0.
    pub vehicle_start: Pose2,
    /// Forward speed of the vehicle, m/s.
    #[serde(default)]
    pub vehicle_speed: f64,
}

fn default_ground_z() -> f64 {
    -1.7
}

fn default_max_speed() -> f64 {
    DEFAULT_MAX_SPEED
}

/// Grid extents without the channel count, which is fixed by the rasterizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridExtent {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub cell: f64,
}

impl GridExtent {
    pub fn grid(&self) -> GridConfig {
        GridConfig {
            x_range: self.x_range,
            y_range: self.y_range,
            z_range: self.z_range,
            cell: self.cell,
            channels: RASTER_CHANNELS,
        }
    }
}

impl Default for GridExtent {
    fn default() -> Self {
        let g = GridConfig::default();
        Self {
            x_range: g.x_range,
            y_range: g.y_range,
            z_range: g.z_range,
            cell: g.cell,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Grid in the vehicle sensor frame.
    pub ego: GridExtent,
    /// Grid in the roadside sensor frame.
    pub infra: GridExtent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorInit {
    #[serde(rename = "zeros")]
    Zeros,
    #[serde(rename = "finite_difference")]
    FiniteDifference,
}

impl EstimatorInit {
    pub fn params(&self, channels: usize) -> EstimatorParams {
        match self {
            EstimatorInit::Zeros => EstimatorParams::zeros(channels),
            EstimatorInit::FiniteDifference => EstimatorParams::fd_init(channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub k_min: usize,
    pub k_max: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Starting point for training.
    pub init: EstimatorInit,
    /// Estimator used by `simulate` when no parameter file is given.
    pub estimator: EstimatorInit,
    /// Trained parameter file, relative to the config file.
    pub params: Option<PathBuf>,
}

impl Default for FlowSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            k_min: 1,
            k_max: 2,
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            init: EstimatorInit::Zeros,
            estimator: EstimatorInit::FiniteDifference,
            params: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub latencies_ms: Vec<f64>,
    pub jitter: bool,
    pub jitter_range_ms: (f64, f64),
    pub period_ms: f64,
    /// Merge threshold for late fusion.
    pub late_iou_merge: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            latencies_ms: vec![0.0, 100.0, 200.0, 300.0, 400.0, 500.0],
            jitter: true,
            jitter_range_ms: (-30.0, 30.0),
            period_ms: 100.0,
            late_iou_merge: 0.3,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path`; relative parameter paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(text)?;
        if let Some(p) = &cfg.flow.params {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.flow.params = Some(base.join(p));
            }
        }
        Ok((cfg, bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.modes.is_empty() {
            return Err(Error::Config("no fusion modes listed".into()));
        }
        if self.channel.latencies_ms.is_empty() {
            return Err(Error::Config("no latencies listed".into()));
        }
        for &latency_ms in &self.channel.latencies_ms {
            self.link(latency_ms).validate().map_err(cfg_err)?;
        }
        self.scenario().validate().map_err(cfg_err)?;
        self.pipeline().ego_grid.validate().map_err(cfg_err)?;
        self.pipeline().infra_grid.validate().map_err(cfg_err)?;
        self.detector.validate().map_err(cfg_err)?;
        self.eval.validate()?;
        if let Some(b) = self.codec.bits {
            if !(crate::codec::MIN_BITS..=crate::codec::MAX_BITS).contains(&b) {
                return Err(Error::Config(format!("bit width {b} unsupported")));
            }
        }
        let f = &self.flow;
        if f.k_min < 1 || f.k_min > f.k_max {
            return Err(Error::Config(format!(
                "bad frame offset range [{}, {}]",
                f.k_min, f.k_max
            )));
        }
        if !(f.lr > 0.0 && f.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate must be > 0 and weight decay >= 0".into()));
        }
        let m = self.channel.late_iou_merge;
        if !(m > 0.0 && m < 1.0) {
            return Err(Error::Config(format!("late fusion merge threshold {m} outside (0, 1)")));
        }
        Ok(())
    }

    fn scenario_with_seed(&self, seed: u64) -> Scenario {
        let s = &self.scenario;
        let duration = s.num_frames as f64 * self.channel.period_ms * 1e-3;
        Scenario {
            actors: s.traffic.generate(seed, s.ground_z),
            infra: s.infra,
            vehicle: s.vehicle,
            vehicle_trajectory: if s.vehicle_speed == 0.0 || duration == 0.0 {
                Trajectory::stationary(s.vehicle_start)
            } else {
                Trajectory::straight(s.vehicle_start, s.vehicle_speed, duration)
            },
            frame_period_ms: self.channel.period_ms,
            num_frames: s.num_frames,
            seed,
            ground_z: s.ground_z,
            max_speed: s.max_speed,
        }
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario_with_seed(self.scenario.seed)
    }

    /// Same layout, independently drawn traffic: used to score the
    /// estimator on sequences it was not trained on.
    pub fn holdout_scenario(&self) -> Scenario {
        self.scenario_with_seed(derive_seed(&[self.scenario.seed, TAG_HOLDOUT]))
    }

    pub fn link(&self, latency_ms: f64) -> LatencyLink {
        let link = LatencyLink {
            latency_ms,
            jitter_range_ms: self.channel.jitter_range_ms,
            frame_period_ms: self.channel.period_ms,
            seed: self.scenario.seed,
        };
        if self.channel.jitter {
            link
        } else {
            link.without_jitter()
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            ego_grid: self.grid.ego.grid(),
            infra_grid: self.grid.infra.grid(),
            detector: self.detector,
            codec: self.codec,
            late_iou_merge: self.channel.late_iou_merge,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.flow.lr,
            weight_decay: self.flow.weight_decay,
            epochs: self.flow.epochs,
            seed: self.scenario.seed,
        }
    }

    pub fn initial_params(&self) -> EstimatorParams {
        self.flow.init.params(RASTER_CHANNELS)
    }

    /// Estimator for `simulate`: the parameter file if configured.
    pub fn estimator(&self) -> Result<EstimatorParams> {
        match &self.flow.params {
            Some(p) => crate::cli::load_params(p),
            None => Ok(self.flow.estimator.params(RASTER_CHANNELS)),
        }
    }
}
