//! Detection scoring: ROI filtering, greedy matching and 11-point
//! interpolated average precision.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, iou_3d, Box3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IouMode {
    #[serde(rename = "bev")]
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouMode {
    pub fn name(&self) -> &'static str {
        match self {
            IouMode::Bev => "bev",
            IouMode::ThreeD => "3d",
        }
    }

    pub fn iou(&self, a: &Box3D, b: &Box3D) -> Result<f64> {
        match self {
            IouMode::Bev => bev_iou(a, b),
            IouMode::ThreeD => iou_3d(a, b),
        }
    }
}

/// Axis-aligned rectangle in the ego frame, closed on every side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Default for Roi {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            y_min: -39.12,
            x_max: 100.0,
            y_max: 39.12,
        }
    }
}

impl Roi {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub modes: Vec<IouMode>,
    pub roi: Roi,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.5, 0.7],
            modes: vec![IouMode::Bev, IouMode::ThreeD],
            roi: Roi::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() || self.modes.is_empty() {
            return Err(Error::Config(
                "evaluation needs at least one threshold and one mode".into(),
            ));
        }
        if let Some(t) = self.iou_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!("IoU threshold {t} outside (0, 1]")));
        }
        let r = &self.roi;
        if !(r.x_min <= r.x_max && r.y_min <= r.y_max) {
            return Err(Error::Config(format!("ROI {r:?} is not well ordered")));
        }
        Ok(())
    }
}

pub fn roi_filter(boxes: &[Box3D], roi: &Roi) -> Vec<Box3D> {
    boxes.iter().filter(|b| roi.contains(b.cx, b.cy)).copied().collect()
}

/// Indices of `preds` by descending confidence, ties by ascending index.
pub fn confidence_order(preds: &[Box3D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    order
}

/// TP flag for every prediction (indexed like `preds`). Each prediction, in
/// confidence order, takes the unmatched ground truth of highest IoU when
/// that IoU reaches `threshold`.
pub fn match_detections(
    preds: &[Box3D],
    gts: &[Box3D],
    iou_fn: impl Fn(&Box3D, &Box3D) -> Result<f64>,
    threshold: f64,
) -> Result<Vec<bool>> {
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; preds.len()];
    for i in confidence_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou_fn(&preds[i], g)?;
            if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = true;
        }
    }
    Ok(flags)
}

/// 11-point interpolated AP of confidence-ordered TP/FP flags.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    // best precision among ranks reaching each recall level i/10
    let mut best = [0.0f64; 11];
    let mut tp = 0usize;
    for (rank, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        for (i, b) in best.iter_mut().enumerate() {
            if 10 * tp >= i * num_gt && precision > *b {
                *b = precision;
            }
        }
    }
    best.iter().sum::<f64>() / 11.0
}

pub fn mean_ap(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::invalid("mean AP over an empty class set"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Boxes of one evaluated frame, both in the ego frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalFrame {
    pub predictions: Vec<Box3D>,
    pub ground_truth: Vec<Box3D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub class_id: u32,
    pub mode: IouMode,
    pub threshold: f64,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    pub num_gt: usize,
    /// Set when the class has no ground truth; its AP is then 0.
    pub no_ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub mode: IouMode,
    pub threshold: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: Vec<ApEntry>,
    pub map: Vec<MapEntry>,
    pub ab_mean: f64,
}

impl EvalResult {
    pub fn map_for(&self, mode: IouMode, threshold: f64) -> Option<f64> {
        self.map
            .iter()
            .find(|m| m.mode == mode && m.threshold == threshold)
            .map(|m| m.map)
    }
}

/// Scores a whole run. Frames are pooled into one ranking per class.
pub fn evaluate_run(frames: &[EvalFrame], cfg: &EvalConfig, ab_log: &[usize]) -> Result<EvalResult> {
    cfg.validate()?;
    let frames: Vec<EvalFrame> = frames
        .iter()
        .map(|f| EvalFrame {
            predictions: roi_filter(&f.predictions, &cfg.roi),
            ground_truth: roi_filter(&f.ground_truth, &cfg.roi),
        })
        .collect();
    for b in frames.iter().flat_map(|f| f.predictions.iter().chain(&f.ground_truth)) {
        b.validate()?;
    }
    let classes: BTreeSet<u32> = frames
        .iter()
        .flat_map(|f| f.predictions.iter().chain(&f.ground_truth))
        .map(|b| b.class_id)
        .collect();

    let mut ap = Vec::new();
    let mut map = Vec::new();
    for &mode in &cfg.modes {
        for &threshold in &cfg.iou_thresholds {
            let mut class_aps = Vec::new();
            for &class_id in &classes {
                let entry = class_ap(&frames, class_id, mode, threshold)?;
                class_aps.push(entry.ap);
                ap.push(entry);
            }
            map.push(MapEntry {
                mode,
                threshold,
                map: if class_aps.is_empty() {
                    0.0
                } else {
                    mean_ap(&class_aps)?
                },
            });
        }
    }
    Ok(EvalResult {
        ap,
        map,
        ab_mean: crate::channel::average_bytes(ab_log),
    })
}

fn class_ap(frames: &[EvalFrame], class_id: u32, mode: IouMode, threshold: f64) -> Result<ApEntry> {
    let of_class = |v: &[Box3D]| v.iter().filter(|b| b.class_id == class_id).copied().collect::<Vec<_>>();
    let per_frame: Vec<(Vec<Box3D>, Vec<bool>, usize)> = frames
        .par_iter()
        .map(|f| {
            let preds = of_class(&f.predictions);
            let gts = of_class(&f.ground_truth);
            let flags = match_detections(&preds, &gts, |a, b| mode.iou(a, b), threshold)?;
            Ok((preds, flags, gts.len()))
        })
        .collect::<Result<_>>()?;

    let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut num_gt = 0;
    for (fi, (preds, flags, n)) in per_frame.iter().enumerate() {
        num_gt += n;
        for (pi, (p, &hit)) in preds.iter().zip(flags).enumerate() {
            pooled.push((p.confidence, fi, pi, hit));
        }
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let flags: Vec<bool> = pooled.iter().map(|p| p.3).collect();
    let tp = flags.iter().filter(|&&f| f).count();
    Ok(ApEntry {
        class_id,
        mode,
        threshold,
        ap: average_precision(&flags, num_gt),
        tp,
        fp: flags.len() - tp,
        num_gt,
        no_ground_truth: num_gt == 0,
    })
}
