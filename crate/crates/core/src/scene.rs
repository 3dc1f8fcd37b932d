//! Seeded synthetic traffic scenes.
//!
//! Actors follow constant-velocity, constant-yaw-rate motion. Each sensor
//! sees a LiDAR-like cloud: points on the vertical faces and roof of every
//! actor in range, plus ground clutter. Surface points are drawn once per
//! (sensor, actor) in the actor's body frame and move rigidly with it, so a
//! static scene rasterizes identically in every frame. Point dropout is
//! drawn per frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, transform_box, Box3D, Pose2};
use crate::rng;

const TAG_SURFACE: u64 = 0x5355_5246;
const TAG_CLUTTER: u64 = 0x434C_5554;
const TAG_DROPOUT: u64 = 0x4452_4F50;
const TAG_TRAFFIC: u64 = 0x5452_4146;

pub const DEFAULT_MAX_SPEED: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

/// Points as `(x, y, z, intensity)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Maps every point through `pose` (z and intensity unchanged).
    pub fn transformed(&self, pose: &Pose2) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| {
                let (x, y) = pose.apply(p.x as f64, p.y as f64);
                Point {
                    x: x as f32,
                    y: y as f32,
                    ..*p
                }
            })
            .collect();
        PointCloud { points }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub box0: Box3D,
    pub velocity: (f64, f64),
    pub yaw_rate: f64,
}

impl Actor {
    pub fn new(box0: Box3D, velocity: (f64, f64), yaw_rate: f64) -> Self {
        Self {
            box0,
            velocity,
            yaw_rate,
        }
    }

    pub fn speed(&self) -> f64 {
        self.velocity.0.hypot(self.velocity.1)
    }

    pub fn class_id(&self) -> u32 {
        self.box0.class_id
    }
}

/// Box of `actor` at time `t` (seconds) under constant velocity and yaw rate.
pub fn actor_box_at(actor: &Actor, t: f64) -> Box3D {
    let b = &actor.box0;
    Box3D {
        cx: b.cx + t * actor.velocity.0,
        cy: b.cy + t * actor.velocity.1,
        yaw: normalize_angle(b.yaw + t * actor.yaw_rate),
        ..*b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub id: u32,
    /// Infrastructure: sensor→world. Vehicle: sensor→vehicle body.
    pub pose: Pose2,
    pub range: f64,
    pub points_per_actor: usize,
    pub clutter_points: usize,
    pub dropout: f64,
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0) {
            return Err(Error::invalid(format!("sensor range {} must be > 0", self.range)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !self.pose.is_valid() {
            return Err(Error::invalid("sensor pose is not finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SensorRole {
    Infrastructure,
    Vehicle,
}

/// Piecewise-linear pose over time. Held constant outside the waypoint span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `(t_seconds, pose)`, strictly increasing in time.
    pub waypoints: Vec<(f64, Pose2)>,
}

impl Trajectory {
    pub fn stationary(pose: Pose2) -> Self {
        Self {
            waypoints: vec![(0.0, pose)],
        }
    }

    pub fn straight(start: Pose2, speed: f64, duration: f64) -> Self {
        let (s, c) = start.yaw.sin_cos();
        let end = Pose2::new(
            start.x + c * speed * duration,
            start.y + s * speed * duration,
            start.yaw,
        );
        Self {
            waypoints: vec![(0.0, start), (duration, end)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::invalid("trajectory needs at least one waypoint"));
        }
        if self.waypoints.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::invalid("trajectory waypoint times must increase"));
        }
        Ok(())
    }

    pub fn pose_at(&self, t: f64) -> Pose2 {
        let wps = &self.waypoints;
        if t <= wps[0].0 {
            return wps[0].1;
        }
        let last = wps[wps.len() - 1];
        if t >= last.0 {
            return last.1;
        }
        let i = wps.partition_point(|w| w.0 <= t) - 1;
        let (t0, p0) = wps[i];
        let (t1, p1) = wps[i + 1];
        let a = (t - t0) / (t1 - t0);
        let dyaw = normalize_angle(p1.yaw - p0.yaw);
        Pose2::new(p0.x + a * (p1.x - p0.x), p0.y + a * (p1.y - p0.y), p0.yaw + a * dyaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub actors: Vec<Actor>,
    pub infra: SensorSpec,
    pub vehicle: SensorSpec,
    pub vehicle_trajectory: Trajectory,
    pub frame_period_ms: f64,
    pub num_frames: usize,
    pub seed: u64,
    pub ground_z: f64,
    pub max_speed: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_period_ms > 0.0) {
            return Err(Error::invalid("frame period must be > 0"));
        }
        self.infra.validate()?;
        self.vehicle.validate()?;
        self.vehicle_trajectory.validate()?;
        for (i, a) in self.actors.iter().enumerate() {
            a.box0.validate()?;
            if a.speed() > self.max_speed {
                return Err(Error::invalid(format!(
                    "actor {i} speed {} exceeds bound {}",
                    a.speed(),
                    self.max_speed
                )));
            }
        }
        if self.infra.id == self.vehicle.id {
            return Err(Error::invalid("infrastructure and vehicle sensors need distinct ids"));
        }
        Ok(())
    }

    pub fn frame_period_s(&self) -> f64 {
        self.frame_period_ms * 1e-3
    }

    /// Last valid sample time, in seconds.
    pub fn horizon(&self) -> f64 {
        self.num_frames as f64 * self.frame_period_s()
    }

    /// Nominal capture time of frame `index`, in microseconds.
    pub fn frame_time_us(&self, index: usize) -> u64 {
        (index as f64 * self.frame_period_ms * 1000.0).round() as u64
    }

    pub fn sensor(&self, role: SensorRole) -> &SensorSpec {
        match role {
            SensorRole::Infrastructure => &self.infra,
            SensorRole::Vehicle => &self.vehicle,
        }
    }

    /// Ego frame at `t`: the vehicle sensor frame.
    pub fn ego_pose(&self, t: f64) -> Pose2 {
        self.vehicle_trajectory.pose_at(t).compose(&self.vehicle.pose)
    }

    /// Sensor→world pose at `t`.
    pub fn sensor_pose(&self, role: SensorRole, t: f64) -> Pose2 {
        match role {
            SensorRole::Infrastructure => self.infra.pose,
            SensorRole::Vehicle => self.ego_pose(t),
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t <= self.horizon()) {
            return Err(Error::OutsideHorizon {
                t,
                horizon: self.horizon(),
            });
        }
        Ok(())
    }

    /// Point cloud and in-range ground truth, both in the sensor frame.
    pub fn sample_frame(&self, role: SensorRole, t: f64) -> Result<(PointCloud, Vec<Box3D>)> {
        self.check_time(t)?;
        let sensor = self.sensor(role);
        let pose = self.sensor_pose(role, t);
        let to_sensor = pose.inverse();
        let id = sensor.id as u64;

        let mut points = Vec::new();
        let mut boxes = Vec::new();
        for (ai, actor) in self.actors.iter().enumerate() {
            let world = actor_box_at(actor, t);
            if (world.cx - pose.x).hypot(world.cy - pose.y) > sensor.range {
                continue;
            }
            let local = transform_box(&world, &to_sensor);
            let body = Pose2 {
                x: local.cx,
                y: local.cy,
                yaw: local.yaw,
            };
            let mut rng = rng::stream(&[self.seed, TAG_SURFACE, id, ai as u64]);
            for _ in 0..sensor.points_per_actor {
                let (bx, by, bz) = surface_sample(&mut rng, &local);
                let (x, y) = body.apply(bx, by);
                points.push(Point {
                    x: x as f32,
                    y: y as f32,
                    z: (local.cz + bz) as f32,
                    intensity: rng.gen::<f32>(),
                });
            }
            boxes.push(local);
        }

        let mut rng = rng::stream(&[self.seed, TAG_CLUTTER, id]);
        for _ in 0..sensor.clutter_points {
            let r = sensor.range * rng.gen::<f64>().sqrt();
            let phi = rng.gen::<f64>() * std::f64::consts::TAU;
            points.push(Point {
                x: (r * phi.cos()) as f32,
                y: (r * phi.sin()) as f32,
                z: self.ground_z as f32,
                intensity: rng.gen::<f32>(),
            });
        }

        if sensor.dropout > 0.0 {
            let key = (t * 1e6).round() as u64;
            let mut rng = rng::stream(&[self.seed, TAG_DROPOUT, id, key]);
            points.retain(|_| rng.gen::<f64>() >= sensor.dropout);
        }

        Ok((PointCloud { points }, boxes))
    }

    /// Every actor expressed in the ego frame at `t`, visible or not.
    pub fn ground_truth_ego(&self, t: f64) -> Vec<Box3D> {
        let to_ego = self.ego_pose(t).inverse();
        self.actors
            .iter()
            .map(|a| transform_box(&actor_box_at(a, t), &to_ego))
            .collect()
    }
}

/// Uniform sample over the four vertical faces and the roof, relative to
/// the box center in its body frame.
fn surface_sample<R: Rng>(rng: &mut R, b: &Box3D) -> (f64, f64, f64) {
    let (hl, hw, hh) = (0.5 * b.l, 0.5 * b.w, 0.5 * b.h);
    let side_l = b.l * b.h;
    let side_w = b.w * b.h;
    let roof = b.l * b.w;
    let total = 2.0 * side_l + 2.0 * side_w + roof;
    let pick = rng.gen::<f64>() * total;
    let u = rng.gen::<f64>() * 2.0 - 1.0;
    let v = rng.gen::<f64>() * 2.0 - 1.0;
    if pick < roof {
        (u * hl, v * hw, hh)
    } else if pick < roof + 2.0 * side_l {
        let sign = if pick < roof + side_l { 1.0 } else { -1.0 };
        (u * hl, sign * hw, v * hh)
    } else {
        let sign = if pick < roof + 2.0 * side_l + side_w { 1.0 } else { -1.0 };
        (sign * hl, u * hw, v * hh)
    }
}

/// Parameters for seeded random traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficSpec {
    pub num_actors: usize,
    /// World-frame spawn rectangle `(x_min, y_min, x_max, y_max)`.
    pub spawn_area: (f64, f64, f64, f64),
    pub speed_range: (f64, f64),
    pub yaw_rate_range: (f64, f64),
    /// Nominal `(w, l, h)`; each actor is scaled by up to ±10 %.
    pub size: (f64, f64, f64),
    /// Minimum center spacing at t = 0.
    pub min_spacing: f64,
    pub class_id: u32,
}

impl Default for TrafficSpec {
    fn default() -> Self {
        Self {
            num_actors: 12,
            spawn_area: (5.0, -20.0, 45.0, 20.0),
            speed_range: (0.0, 12.0),
            yaw_rate_range: (0.0, 0.0),
            size: (1.8, 4.5, 1.5),
            min_spacing: 6.0,
            class_id: 0,
        }
    }
}

impl TrafficSpec {
    /// Places actors by rejection sampling; gives up on an actor after
    /// 1000 failed draws.
    pub fn generate(&self, seed: u64, ground_z: f64) -> Vec<Actor> {
        let mut rng = rng::stream(&[seed, TAG_TRAFFIC]);
        let (x0, y0, x1, y1) = self.spawn_area;
        let mut actors: Vec<Actor> = Vec::with_capacity(self.num_actors);
        for _ in 0..self.num_actors {
            for _attempt in 0..1000 {
                let cx = x0 + rng.gen::<f64>() * (x1 - x0);
                let cy = y0 + rng.gen::<f64>() * (y1 - y0);
                let yaw = (rng.gen::<f64>() * 2.0 - 1.0) * std::f64::consts::PI;
                let speed = lerp(self.speed_range, rng.gen());
                let yaw_rate = lerp(self.yaw_rate_range, rng.gen());
                let scale = 0.9 + 0.2 * rng.gen::<f64>();
                let clear = actors
                    .iter()
                    .all(|a| (a.box0.cx - cx).hypot(a.box0.cy - cy) >= self.min_spacing);
                if !clear {
                    continue;
                }
                let (w, l, h) = self.size;
                let h = h * scale;
                let b = Box3D::new(
                    [cx, cy, ground_z + 0.5 * h],
                    [w * scale, l * scale, h],
                    yaw,
                    self.class_id,
                );
                actors.push(Actor::new(b, (speed * yaw.cos(), speed * yaw.sin()), yaw_rate));
                break;
            }
        }
        actors
    }
}

fn lerp(range: (f64, f64), a: f64) -> f64 {
    range.0 + a * (range.1 - range.0)
}
