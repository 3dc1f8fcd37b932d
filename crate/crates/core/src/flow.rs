//! Feature flow: a base feature plus its first-order time derivative,
//! the per-cell linear derivative estimator, and its self-supervised
//! training on raw infrastructure sequences.
//!
//! Timestamps are microseconds everywhere outside this module; derivative
//! values are per second.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::FeatureGrid;
use crate::rng;
use crate::scene::PointCloud;

const TAG_PAIRS: u64 = 0x5041_4952;
const TAG_SHUFFLE: u64 = 0x5348_5546;

/// Microseconds to seconds.
#[inline]
pub fn us_to_s(us: i128) -> f64 {
    us as f64 * 1e-6
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFlow {
    pub base: FeatureGrid,
    pub deriv: FeatureGrid,
    pub t_ref_us: u64,
}

impl FeatureFlow {
    pub fn new(base: FeatureGrid, deriv: FeatureGrid, t_ref_us: u64) -> Result<Self> {
        base.ensure_same_dims(&deriv)?;
        if base.grid != deriv.grid {
            return Err(Error::invalid("base and derivative live on different grids"));
        }
        Ok(Self { base, deriv, t_ref_us })
    }

    /// A flow that predicts `base` at every future time.
    pub fn stationary(base: FeatureGrid, t_ref_us: u64) -> Self {
        let deriv = base.map(|_| 0.0);
        Self { base, deriv, t_ref_us }
    }
}

/// `(f_curr − f_prev) / dt`, elementwise.
pub fn finite_difference_derivative(f_prev: &FeatureGrid, f_curr: &FeatureGrid, dt: f64) -> Result<FeatureGrid> {
    check_dt(dt)?;
    f_prev.zip_map(f_curr, |p, c| ((c as f64 - p as f64) / dt) as f32)
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("time step {dt} must be > 0")));
    }
    Ok(())
}

/// Parameters of the derivative estimator: a 1×1 convolution mapping the
/// `2C` concatenated channels `[f_prev; f_curr]` of a cell to `C` outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams {
    pub channels: usize,
    /// Row-major `(C, 2C)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl EstimatorParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            channels,
            weights: vec![0.0; 2 * channels * channels],
            bias: vec![0.0; channels],
        }
    }

    /// `[−I | +I]` with zero bias: reproduces the finite difference exactly.
    pub fn fd_init(channels: usize) -> Self {
        let mut p = Self::zeros(channels);
        for c in 0..channels {
            p.weights[c * 2 * channels + c] = -1.0;
            p.weights[c * 2 * channels + channels + c] = 1.0;
        }
        p
    }

    #[inline]
    pub fn weight(&self, out: usize, input: usize) -> f64 {
        self.weights[out * 2 * self.channels + input]
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if self.weights.len() != 2 * c * c || self.bias.len() != c {
            return Err(Error::invalid(format!(
                "estimator for {c} channels needs {} weights and {c} biases, got {} and {}",
                2 * c * c,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("estimator parameters must be finite"));
        }
        Ok(())
    }

    /// Flat view: weights followed by bias.
    pub fn get_flat(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        if i < self.weights.len() {
            self.weights[i] = v;
        } else {
            let n = self.weights.len();
            self.bias[i - n] = v;
        }
    }
}

fn check_params_for(theta: &EstimatorParams, f: &FeatureGrid) -> Result<()> {
    theta.validate()?;
    if theta.channels != f.channels() {
        return Err(Error::invalid(format!(
            "estimator expects {} channels, feature has {}",
            theta.channels,
            f.channels()
        )));
    }
    Ok(())
}

/// Per-cell linear estimate of the feature derivative from two frames `dt`
/// seconds apart.
pub fn estimate_derivative(
    theta: &EstimatorParams,
    f_prev: &FeatureGrid,
    f_curr: &FeatureGrid,
    dt: f64,
) -> Result<FeatureGrid> {
    check_dt(dt)?;
    f_prev.ensure_same_dims(f_curr)?;
    check_params_for(theta, f_curr)?;
    let c_n = theta.channels;
    let plane = f_curr.plane_len();
    let (prev, curr) = (f_prev.data(), f_curr.data());
    let mut out = f_curr.clone();
    let data = out.data_mut();
    let mut x = vec![0.0f64; 2 * c_n];
    for cell in 0..plane {
        for j in 0..c_n {
            x[j] = prev[j * plane + cell] as f64;
            x[c_n + j] = curr[j * plane + cell] as f64;
        }
        for c in 0..c_n {
            let row = &theta.weights[c * 2 * c_n..(c + 1) * 2 * c_n];
            let mut acc = theta.bias[c];
            for (w, xv) in row.iter().zip(&x) {
                acc += w * xv;
            }
            data[c * plane + cell] = (acc / dt) as f32;
        }
    }
    Ok(out)
}

/// Linear extrapolation `base + Δt·deriv` to `t_target_us`.
pub fn predict(flow: &FeatureFlow, t_target_us: u64) -> Result<FeatureGrid> {
    if t_target_us < flow.t_ref_us {
        return Err(Error::PredictIntoPast {
            target_us: t_target_us,
            ref_us: flow.t_ref_us,
        });
    }
    let dt = us_to_s(t_target_us as i128 - flow.t_ref_us as i128);
    if dt == 0.0 {
        return Ok(flow.base.clone());
    }
    flow.base.zip_map(&flow.deriv, |b, d| (b as f64 + dt * d as f64) as f32)
}

/// Cosine of the angle between the flattened tensors.
pub fn cosine_similarity(a: &FeatureGrid, b: &FeatureGrid) -> Result<f64> {
    a.ensure_same_dims(b)?;
    cosine_f64(a.data().iter().map(|&v| v as f64), b.data().iter().map(|&v| v as f64))
}

fn cosine_f64(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// A point cloud with its capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedCloud {
    pub cloud: PointCloud,
    pub t_us: u64,
}

/// Three frames from one sensor: the two used to build the flow and the
/// future frame it should predict.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub prev: TimedCloud,
    pub curr: TimedCloud,
    pub future: TimedCloud,
    pub k: usize,
}

impl TrainingPair {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("frame offset k must be >= 1"));
        }
        if !(self.prev.t_us < self.curr.t_us && self.curr.t_us < self.future.t_us) {
            return Err(Error::invalid("training pair timestamps must strictly increase"));
        }
        Ok(())
    }

    pub fn prepare(&self, featurize: impl Fn(&PointCloud) -> Result<FeatureGrid>) -> Result<PreparedPair> {
        self.validate()?;
        Ok(PreparedPair {
            prev: featurize(&self.prev.cloud)?,
            curr: featurize(&self.curr.cloud)?,
            future: featurize(&self.future.cloud)?,
            dt: us_to_s(self.curr.t_us as i128 - self.prev.t_us as i128),
            horizon: us_to_s(self.future.t_us as i128 - self.curr.t_us as i128),
        })
    }
}

/// A training pair with its features computed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    pub prev: FeatureGrid,
    pub curr: FeatureGrid,
    pub future: FeatureGrid,
    /// Seconds between `prev` and `curr`.
    pub dt: f64,
    /// Seconds between `curr` and `future`.
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradient {
    pub fn get_flat(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }
}

impl PreparedPair {
    fn check(&self, theta: &EstimatorParams) -> Result<()> {
        self.prev.ensure_same_dims(&self.curr)?;
        self.curr.ensure_same_dims(&self.future)?;
        check_params_for(theta, &self.curr)?;
        check_dt(self.dt)
    }

    /// Prediction at the future frame, kept in f64.
    fn prediction(&self, theta: &EstimatorParams) -> Vec<f64> {
        let c_n = theta.channels;
        let plane = self.curr.plane_len();
        let r = self.horizon / self.dt;
        let (prev, curr) = (self.prev.data(), self.curr.data());
        let mut pred = vec![0.0; c_n * plane];
        let mut x = vec![0.0f64; 2 * c_n];
        for cell in 0..plane {
            for j in 0..c_n {
                x[j] = prev[j * plane + cell] as f64;
                x[c_n + j] = curr[j * plane + cell] as f64;
            }
            for c in 0..c_n {
                let row = &theta.weights[c * 2 * c_n..(c + 1) * 2 * c_n];
                let mut acc = theta.bias[c];
                for (w, xv) in row.iter().zip(&x) {
                    acc += w * xv;
                }
                pred[c * plane + cell] = x[c_n + c] + r * acc;
            }
        }
        pred
    }

    pub fn loss(&self, theta: &EstimatorParams) -> Result<f64> {
        self.check(theta)?;
        let pred = self.prediction(theta);
        let cos = cosine_f64(pred.iter().copied(), self.future.data().iter().map(|&v| v as f64))?;
        Ok(1.0 - cos)
    }

    /// Loss and its analytic gradient with respect to `theta`.
    pub fn loss_and_gradient(&self, theta: &EstimatorParams) -> Result<(f64, Gradient)> {
        self.check(theta)?;
        let c_n = theta.channels;
        let plane = self.curr.plane_len();
        let pred = self.prediction(theta);
        let target = self.future.data();

        let (mut dot, mut pp, mut yy) = (0.0, 0.0, 0.0);
        for (p, &y) in pred.iter().zip(target) {
            let y = y as f64;
            dot += p * y;
            pp += p * p;
            yy += y * y;
        }
        if pp == 0.0 || yy == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let (np, ny) = (pp.sqrt(), yy.sqrt());
        let cos = dot / (np * ny);
        let loss = 1.0 - cos.clamp(-1.0, 1.0);

        // dL/dp = −y/(|p||y|) + cos·p/|p|²
        let a = 1.0 / (np * ny);
        let b = cos / pp;
        let r = self.horizon / self.dt;
        let mut gw = vec![0.0; 2 * c_n * c_n];
        let mut gb = vec![0.0; c_n];
        let (prev, curr) = (self.prev.data(), self.curr.data());
        let mut x = vec![0.0f64; 2 * c_n];
        for cell in 0..plane {
            for j in 0..c_n {
                x[j] = prev[j * plane + cell] as f64;
                x[c_n + j] = curr[j * plane + cell] as f64;
            }
            for c in 0..c_n {
                let i = c * plane + cell;
                let g = r * (-a * target[i] as f64 + b * pred[i]);
                if g == 0.0 {
                    continue;
                }
                gb[c] += g;
                let row = &mut gw[c * 2 * c_n..(c + 1) * 2 * c_n];
                for (gwj, xv) in row.iter_mut().zip(&x) {
                    *gwj += g * xv;
                }
            }
        }
        Ok((loss, Gradient { weights: gw, bias: gb }))
    }
}

/// `1 − cos(prediction at the future frame, feature of the future frame)`.
pub fn flow_loss(
    theta: &EstimatorParams,
    pair: &TrainingPair,
    featurize: impl Fn(&PointCloud) -> Result<FeatureGrid>,
) -> Result<f64> {
    pair.prepare(featurize)?.loss(theta)
}

pub fn flow_loss_gradient(
    theta: &EstimatorParams,
    pair: &TrainingPair,
    featurize: impl Fn(&PointCloud) -> Result<FeatureGrid>,
) -> Result<Gradient> {
    Ok(pair.prepare(featurize)?.loss_and_gradient(theta)?.1)
}

/// One pair per anchor frame `i` with `i − 1` and `i + k_max` available;
/// `k` is drawn uniformly from `k_min..=k_max`.
pub fn make_pairs(frames: &[TimedCloud], k_min: usize, k_max: usize, seed: u64) -> Result<Vec<TrainingPair>> {
    if k_min < 1 || k_min > k_max {
        return Err(Error::invalid(format!("bad frame offset range [{k_min}, {k_max}]")));
    }
    let needed = k_max + 2;
    if frames.len() < needed {
        return Err(Error::TooFewFrames {
            needed,
            got: frames.len(),
        });
    }
    let mut rng = rng::stream(&[seed, TAG_PAIRS]);
    let pairs = (1..frames.len() - k_max)
        .map(|i| {
            let k = rng.gen_range(k_min..=k_max);
            TrainingPair {
                prev: frames[i - 1].clone(),
                curr: frames[i].clone(),
                future: frames[i + k].clone(),
                k,
            }
        })
        .collect::<Vec<_>>();
    for p in &pairs {
        p.validate()?;
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.01,
            epochs: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss over each epoch's pairs, evaluated before each step.
    pub epoch_mean_loss: Vec<f64>,
}

pub fn mean_loss(theta: &EstimatorParams, pairs: &[PreparedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    let mut total = 0.0;
    for p in pairs {
        total += p.loss(theta)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Per-pair gradient descent with decoupled L2 decay on the weights,
/// visiting pairs in a seeded per-epoch shuffle.
pub fn train_prepared(
    theta0: &EstimatorParams,
    pairs: &[PreparedPair],
    cfg: &TrainConfig,
) -> Result<(EstimatorParams, TrainLog)> {
    if pairs.is_empty() {
        return Err(Error::invalid("training needs at least one pair"));
    }
    theta0.validate()?;
    let mut theta = theta0.clone();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(&[cfg.seed, TAG_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grad) = pairs[i].loss_and_gradient(&theta)?;
            total += loss;
            for (w, g) in theta.weights.iter_mut().zip(&grad.weights) {
                *w -= cfg.lr * (g + cfg.weight_decay * *w);
            }
            for (b, g) in theta.bias.iter_mut().zip(&grad.bias) {
                *b -= cfg.lr * g;
            }
            if theta.validate().is_err() {
                return Err(Error::Diverged { epoch, loss });
            }
        }
        let mean = total / pairs.len() as f64;
        log.epoch_mean_loss.push(mean);
        if !mean.is_finite() || mean > 2.0 + 1e-6 || theta.validate().is_err() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
    }
    Ok((theta, log))
}

pub fn train(
    theta0: &EstimatorParams,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    featurize: impl Fn(&PointCloud) -> Result<FeatureGrid>,
) -> Result<(EstimatorParams, TrainLog)> {
    let prepared = pairs
        .iter()
        .map(|p| p.prepare(&featurize))
        .collect::<Result<Vec<_>>>()?;
    train_prepared(theta0, &prepared, cfg)
}
