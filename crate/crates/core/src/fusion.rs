//! Aligning infrastructure features into the ego frame, max-fusion, the
//! proxy detector and the per-frame cooperative pipelines.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::channel::{pair_jitter, transmit, LatencyLink};
use crate::codec::{
    attention_mask, decode_cloud, decode_detections, decode_packet, encode_cloud, encode_detections, encode_packet,
    spatial_compress, spatial_decompress, PacketOptions, HEADER_LEN,
};
use crate::error::{Error, Result};
use crate::featurizer::{rasterize, FeatureGrid, GridConfig, CH_COUNT, CH_OCCUPANCY};
use crate::flow::{estimate_derivative, predict, EstimatorParams, FeatureFlow};
use crate::geometry::{bev_iou, normalize_angle, transform_box, Box3D, Pose2};
use crate::scene::{PointCloud, Scenario, SensorRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FusionMode {
    EarlyFusion,
    LateFusion,
    /// Fuses the delivered infrastructure feature as is.
    MiddleNoPrediction,
    /// Derivative estimated on the roadside from raw frames.
    MiddleFlowInfra,
    /// Derivative estimated on the vehicle from received features.
    MiddleFlowVehicle,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::EarlyFusion,
        FusionMode::LateFusion,
        FusionMode::MiddleNoPrediction,
        FusionMode::MiddleFlowInfra,
        FusionMode::MiddleFlowVehicle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::EarlyFusion => "EarlyFusion",
            FusionMode::LateFusion => "LateFusion",
            FusionMode::MiddleNoPrediction => "MiddleNoPrediction",
            FusionMode::MiddleFlowInfra => "MiddleFlowInfra",
            FusionMode::MiddleFlowVehicle => "MiddleFlowVehicle",
        }
    }

    pub fn is_middle(&self) -> bool {
        matches!(
            self,
            FusionMode::MiddleNoPrediction | FusionMode::MiddleFlowInfra | FusionMode::MiddleFlowVehicle
        )
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub occupancy_threshold: f64,
    pub min_cells: usize,
    pub connectivity: Connectivity,
    /// z center and height given to every emitted box.
    pub z_center: f64,
    pub height: f64,
    /// Point count that maps to full confidence.
    pub full_confidence_points: usize,
    pub class_id: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            occupancy_threshold: 0.5,
            min_cells: 4,
            connectivity: Connectivity::Eight,
            z_center: -0.95,
            height: 1.5,
            full_confidence_points: 300,
            class_id: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.occupancy_threshold > 0.0) {
            return Err(Error::invalid("occupancy threshold must be > 0"));
        }
        if self.min_cells < 1 {
            return Err(Error::invalid("min_cells must be >= 1"));
        }
        if !(self.height > 0.0) {
            return Err(Error::invalid("box height must be > 0"));
        }
        Ok(())
    }
}

/// Resamples `f` (living in the frame `pose_src`) onto `grid_dst` (in the
/// frame `pose_dst`), both poses given in a common world frame. Bilinear
/// interpolation; taps outside the source grid read as zero.
pub fn align(f: &FeatureGrid, pose_src: &Pose2, pose_dst: &Pose2, grid_dst: &GridConfig) -> FeatureGrid {
    let dst_to_src = Pose2::relative(pose_dst, pose_src);
    let src = &f.grid;
    let (c_n, sh, sw) = f.dims();
    let out_grid = GridConfig {
        channels: c_n,
        ..*grid_dst
    };
    let mut out = FeatureGrid::zeros(out_grid);
    let (_, dh, dw) = out.dims();
    const SNAP: f64 = 1e-6;
    for y in 0..dh {
        for x in 0..dw {
            let (px, py) = out_grid.cell_center(y, x);
            let (qx, qy) = dst_to_src.apply(px, py);
            let mut u = (qx - src.x_range.0) / src.cell - 0.5;
            let mut v = (qy - src.y_range.0) / src.cell - 0.5;
            if (u - u.round()).abs() < SNAP {
                u = u.round();
            }
            if (v - v.round()).abs() < SNAP {
                v = v.round();
            }
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = (u - u0, v - v0);
            let taps = [
                (u0, v0, (1.0 - fu) * (1.0 - fv)),
                (u0 + 1.0, v0, fu * (1.0 - fv)),
                (u0, v0 + 1.0, (1.0 - fu) * fv),
                (u0 + 1.0, v0 + 1.0, fu * fv),
            ];
            for (tu, tv, wgt) in taps {
                if wgt == 0.0 || tu < 0.0 || tv < 0.0 || tu >= sw as f64 || tv >= sh as f64 {
                    continue;
                }
                let (iu, iv) = (tu as usize, tv as usize);
                for c in 0..c_n {
                    let i = out.index(c, y, x);
                    let val = out.data()[i] as f64 + wgt * f.get(c, iv, iu) as f64;
                    out.data_mut()[i] = val as f32;
                }
            }
        }
    }
    out
}

/// Element-wise maximum.
pub fn fuse(f_ego: &FeatureGrid, f_infra_aligned: &FeatureGrid) -> Result<FeatureGrid> {
    f_ego.zip_map(f_infra_aligned, f32::max)
}

/// Connected components of the thresholded occupancy channel, each turned
/// into an oriented box. Boxes come out in the order of each component's
/// first cell in row-major scan.
pub fn detect(f: &FeatureGrid, cfg: &DetectorConfig) -> Vec<Box3D> {
    let (c_n, h, w) = f.dims();
    if c_n <= CH_OCCUPANCY {
        return Vec::new();
    }
    let occ = f.channel(CH_OCCUPANCY);
    let on = |i: usize| occ[i] as f64 >= cfg.occupancy_threshold;
    let mut label = vec![usize::MAX; h * w];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    let mut members = Vec::new();
    let neighbours: &[(isize, isize)] = match cfg.connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    let norm = (cfg.full_confidence_points as f64).ln_1p();
    for seed in 0..h * w {
        if label[seed] != usize::MAX || !on(seed) {
            continue;
        }
        let id = boxes.len();
        members.clear();
        stack.push(seed);
        label[seed] = id;
        while let Some(i) = stack.pop() {
            members.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for (dy, dx) in neighbours {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if label[j] == usize::MAX && on(j) {
                    label[j] = id;
                    stack.push(j);
                }
            }
        }
        if members.len() < cfg.min_cells {
            // keep the label so the component is not revisited, but emit nothing
            boxes.push(None);
            continue;
        }
        members.sort_unstable();
        boxes.push(Some(component_box(f, &members, cfg, norm)));
    }
    boxes.into_iter().flatten().collect()
}

fn component_box(f: &FeatureGrid, members: &[usize], cfg: &DetectorConfig, norm: f64) -> Box3D {
    let w = f.width();
    let grid = &f.grid;
    let occ = f.channel(CH_OCCUPANCY);
    let count = f.channel(CH_COUNT);
    let centers: Vec<(f64, f64)> = members.iter().map(|&i| grid.cell_center(i / w, i % w)).collect();

    let (mut mx, mut my, mut mass) = (0.0, 0.0, 0.0);
    for (&i, &(x, y)) in members.iter().zip(&centers) {
        let m = occ[i] as f64;
        mx += m * x;
        my += m * y;
        mass += m;
    }
    let (cx, cy) = (mx / mass, my / mass);

    let n = centers.len() as f64;
    let (ux, uy) = (
        centers.iter().map(|c| c.0).sum::<f64>() / n,
        centers.iter().map(|c| c.1).sum::<f64>() / n,
    );
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in &centers {
        let (dx, dy) = (x - ux, y - uy);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (sxx, syy, sxy) = (sxx / n, syy / n, sxy / n);
    let mid = 0.5 * (sxx + syy);
    let rad = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    let (major, minor) = ((mid + rad).max(0.0), (mid - rad).max(0.0));
    let yaw = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let extent = |var: f64| (2.0 * var.sqrt() * 3f64.sqrt()).max(grid.cell);

    let mean_count = members.iter().map(|&i| count[i] as f64).sum::<f64>() / n;
    let confidence = if norm > 0.0 {
        (mean_count / norm).clamp(0.0, 1.0)
    } else {
        1.0
    };

    Box3D {
        cx,
        cy,
        cz: cfg.z_center,
        w: extent(minor),
        l: extent(major),
        h: cfg.height,
        yaw: normalize_angle(yaw),
        class_id: cfg.class_id,
        confidence,
    }
}

/// Infrastructure points mapped into the ego frame and appended.
pub fn early_fuse(cloud_v: &PointCloud, cloud_i: &PointCloud, rel_pose: &Pose2) -> PointCloud {
    let mut points = cloud_v.points.clone();
    points.extend(cloud_i.transformed(rel_pose).points);
    PointCloud::new(points)
}

/// Greedy per-class NMS by descending confidence; ties keep input order.
pub fn nms(boxes: &[Box3D], iou_threshold: f64) -> Vec<Box3D> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].confidence.total_cmp(&boxes[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<Box3D> = Vec::new();
    for i in order {
        let cand = &boxes[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && bev_iou(k, cand).map(|v| v >= iou_threshold).unwrap_or(false));
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

/// Object-level fusion: infrastructure boxes are moved into the ego frame
/// and the union is reduced with NMS.
pub fn late_fuse(dets_v: &[Box3D], dets_i: &[Box3D], rel_pose: &Pose2, iou_merge: f64) -> Result<Vec<Box3D>> {
    if !(iou_merge > 0.0 && iou_merge < 1.0) {
        return Err(Error::invalid(format!("merge threshold {iou_merge} outside (0, 1)")));
    }
    let mut all: Vec<Box3D> = dets_v.to_vec();
    all.extend(dets_i.iter().map(|b| transform_box(b, rel_pose)));
    Ok(nms(&all, iou_merge))
}

/// Codec settings for the middle-fusion modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// `None` transmits raw `f32`.
    pub bits: Option<u8>,
    pub use_mask: bool,
    pub mask_threshold: f64,
    /// Mask patch size, in cells of the compressed grid.
    pub mask_stride: usize,
    pub spatial_factor: usize,
    pub channel_group: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            bits: Some(6),
            use_mask: true,
            mask_threshold: 0.0,
            mask_stride: 8,
            spatial_factor: 1,
            channel_group: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub ego_grid: GridConfig,
    pub infra_grid: GridConfig,
    pub detector: DetectorConfig,
    pub codec: CodecConfig,
    pub late_iou_merge: f64,
}

/// What one cooperative frame produced.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame: usize,
    pub t_vehicle_us: u64,
    pub t_infra_us: u64,
    pub detections: Vec<Box3D>,
    pub ground_truth: Vec<Box3D>,
    pub ab_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub mode: FusionMode,
    pub frames: Vec<FrameResult>,
    /// Peak number of infrastructure packets held on the vehicle.
    pub storage_counter: usize,
    /// Derivative-estimator invocations on the vehicle.
    pub compute_counter: usize,
}

impl RunOutput {
    pub fn ab_log(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.ab_bytes).collect()
    }
}

struct Pipeline<'a> {
    scenario: &'a Scenario,
    link: &'a LatencyLink,
    cfg: &'a PipelineConfig,
    wire_grid: GridConfig,
}

impl<'a> Pipeline<'a> {
    fn infra_cloud(&self, index: usize) -> Result<PointCloud> {
        let t = self.scenario.frame_time_us(index) as f64 * 1e-6;
        Ok(self.scenario.sample_frame(SensorRole::Infrastructure, t)?.0)
    }

    fn infra_feature(&self, index: usize) -> Result<FeatureGrid> {
        Ok(rasterize(&self.infra_cloud(index)?, &self.cfg.infra_grid)?.with_frame(self.scenario.infra.id))
    }

    fn compress(&self, f: &FeatureGrid) -> Result<FeatureGrid> {
        spatial_compress(f, self.cfg.codec.spatial_factor, self.cfg.codec.channel_group)
    }

    fn decompress(&self, f: &FeatureGrid) -> Result<FeatureGrid> {
        spatial_decompress(
            f,
            self.cfg.codec.spatial_factor,
            self.cfg.codec.channel_group,
            &self.cfg.infra_grid,
        )
    }

    /// Sends a flow packet and returns the received flow (on the wire grid)
    /// and its Average-Byte count.
    fn send_flow(
        &self,
        flow: &FeatureFlow,
        include_derivative: bool,
        mask_from: Option<(&FeatureGrid, &FeatureGrid)>,
    ) -> Result<(FeatureFlow, usize)> {
        let codec = &self.cfg.codec;
        let mask = match mask_from {
            Some((prev, curr)) if codec.use_mask && include_derivative => {
                let (_, h, w) = curr.dims();
                let s = codec.mask_stride;
                Some(attention_mask(prev, curr, (h / s, w / s), codec.mask_threshold)?)
            }
            _ => None,
        };
        let opts = PacketOptions {
            bits: codec.bits,
            mask,
            include_derivative,
        };
        let packet = encode_packet(flow, &self.scenario.infra.pose, &opts)?;
        let delivery = transmit(self.link, packet.bytes, HEADER_LEN, flow.t_ref_us);
        let received = decode_packet(&delivery.bytes)?.into_flow(self.wire_grid)?;
        Ok((received, delivery.ab_bytes))
    }
}

/// Runs every frame of `scenario` under `mode`.
pub fn run_mode(
    mode: FusionMode,
    scenario: &Scenario,
    link: &LatencyLink,
    theta: &EstimatorParams,
    cfg: &PipelineConfig,
) -> Result<RunOutput> {
    scenario.validate()?;
    link.validate()?;
    cfg.detector.validate()?;
    cfg.ego_grid.validate()?;
    cfg.infra_grid.validate()?;
    if (link.frame_period_ms - scenario.frame_period_ms).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "link period {} ms differs from scenario period {} ms",
            link.frame_period_ms, scenario.frame_period_ms
        )));
    }
    if mode.is_middle() {
        let (c, h, w) = cfg.infra_grid.dims();
        let sx = cfg.codec.spatial_factor;
        let sc = cfg.codec.channel_group;
        if sx == 0 || sc == 0 || h % sx != 0 || w % sx != 0 || c % sc != 0 {
            return Err(Error::Config(format!(
                "compression {sx}x/{sc} does not divide grid ({c}, {h}, {w})"
            )));
        }
        if cfg.codec.use_mask {
            let s = cfg.codec.mask_stride;
            if s == 0 || !(h / sx).is_multiple_of(s) || !(w / sx).is_multiple_of(s) {
                return Err(Error::Config(format!(
                    "mask stride {s} does not tile the compressed grid"
                )));
            }
        }
    }
    if matches!(mode, FusionMode::MiddleFlowInfra | FusionMode::MiddleFlowVehicle)
        && theta.channels != cfg.infra_grid.channels
    {
        return Err(Error::Config(format!(
            "estimator has {} channels, infrastructure grid has {}",
            theta.channels, cfg.infra_grid.channels
        )));
    }

    let p = Pipeline {
        scenario,
        link,
        cfg,
        wire_grid: cfg.infra_grid.coarsened(
            cfg.codec.spatial_factor,
            cfg.infra_grid.channels / cfg.codec.channel_group.max(1),
        ),
    };
    let period_us = scenario.frame_period_ms * 1000.0;
    let dt_frames = scenario.frame_period_s();
    let mut frames = Vec::with_capacity(scenario.num_frames);
    let mut retained: VecDeque<(usize, FeatureGrid)> = VecDeque::new();
    let mut storage_counter = 0;
    let mut compute_counter = 0;

    for n in 0..scenario.num_frames {
        let jitter_us = pair_jitter(link, n) * 1000.0;
        let t_v_us = (n as f64 * period_us + jitter_us).round().max(0.0) as u64;
        let t_v = t_v_us as f64 * 1e-6;
        let m = link.delivered_frame_index(n);
        let t_i_us = scenario.frame_time_us(m);
        // prediction never runs backwards; an infrastructure frame captured
        // after the vehicle frame is used as is
        let t_target_us = t_v_us.max(t_i_us);

        let ego_pose = scenario.ego_pose(t_v);
        let rel = Pose2::relative(&scenario.infra.pose, &ego_pose);
        let (ego_cloud, _) = scenario.sample_frame(SensorRole::Vehicle, t_v)?;
        let ground_truth = scenario.ground_truth_ego(t_v);

        let (detections, ab_bytes) = match mode {
            FusionMode::EarlyFusion => {
                let payload = encode_cloud(&p.infra_cloud(m)?);
                let d = transmit(link, payload, 0, t_i_us);
                let fused = early_fuse(&ego_cloud, &decode_cloud(&d.bytes)?, &rel);
                storage_counter = storage_counter.max(1);
                (detect(&rasterize(&fused, &cfg.ego_grid)?, &cfg.detector), d.ab_bytes)
            }
            FusionMode::LateFusion => {
                let infra_dets = detect(&p.infra_feature(m)?, &cfg.detector);
                let d = transmit(link, encode_detections(&infra_dets), 0, t_i_us);
                let received = decode_detections(&d.bytes, cfg.detector.class_id)?;
                let ego_dets = detect(&rasterize(&ego_cloud, &cfg.ego_grid)?, &cfg.detector);
                storage_counter = storage_counter.max(1);
                (late_fuse(&ego_dets, &received, &rel, cfg.late_iou_merge)?, d.ab_bytes)
            }
            FusionMode::MiddleNoPrediction | FusionMode::MiddleFlowInfra | FusionMode::MiddleFlowVehicle => {
                let (infra_feature, ab) = match mode {
                    FusionMode::MiddleNoPrediction => {
                        let base = p.compress(&p.infra_feature(m)?)?;
                        let (rx, ab) = p.send_flow(&FeatureFlow::stationary(base, t_i_us), false, None)?;
                        storage_counter = storage_counter.max(1);
                        (p.decompress(&rx.base)?, ab)
                    }
                    FusionMode::MiddleFlowInfra => {
                        let curr = p.infra_feature(m)?;
                        let prev = if m > 0 { p.infra_feature(m - 1)? } else { curr.clone() };
                        let deriv = estimate_derivative(theta, &prev, &curr, dt_frames)?;
                        let (cprev, ccurr) = (p.compress(&prev)?, p.compress(&curr)?);
                        let flow = FeatureFlow::new(ccurr.clone(), p.compress(&deriv)?, t_i_us)?;
                        let (rx, ab) = p.send_flow(&flow, true, Some((&cprev, &ccurr)))?;
                        storage_counter = storage_counter.max(1);
                        let full = FeatureFlow::new(p.decompress(&rx.base)?, p.decompress(&rx.deriv)?, rx.t_ref_us)?;
                        (predict(&full, t_target_us)?, ab)
                    }
                    _ => {
                        let base = p.compress(&p.infra_feature(m)?)?;
                        let (rx, ab) = p.send_flow(&FeatureFlow::stationary(base, t_i_us), false, None)?;
                        let curr = p.decompress(&rx.base)?;
                        let prev = retained
                            .iter()
                            .rev()
                            .find(|(idx, _)| m > 0 && *idx == m - 1)
                            .map(|(_, f)| f.clone());
                        retained.push_back((m, curr.clone()));
                        storage_counter = storage_counter.max(retained.len());
                        let prev = prev.unwrap_or_else(|| curr.clone());
                        let deriv = estimate_derivative(theta, &prev, &curr, dt_frames)?;
                        compute_counter += 1;
                        let flow = FeatureFlow::new(curr, deriv, t_i_us)?;
                        (predict(&flow, t_target_us)?, ab)
                    }
                };
                let aligned = align(&infra_feature, &scenario.infra.pose, &ego_pose, &cfg.ego_grid);
                let ego_feature = rasterize(&ego_cloud, &cfg.ego_grid)?;
                (detect(&fuse(&ego_feature, &aligned)?, &cfg.detector), ab)
            }
        };

        frames.push(FrameResult {
            frame: n,
            t_vehicle_us: t_v_us,
            t_infra_us: t_i_us,
            detections,
            ground_truth,
            ab_bytes,
        });
    }

    Ok(RunOutput {
        mode,
        frames,
        storage_counter,
        compute_counter,
    })
}
