//! Planar poses, oriented boxes and rotated-box overlap.
//!
//! Rotation about the x/y axes is ignored throughout: a pose is a planar
//! rigid transform and a box only carries a yaw.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for on-edge classification during polygon clipping, in meters.
pub const CLIP_EPS: f64 = 1e-9;

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// A planar rigid transform: rotate by `yaw`, then translate by `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            yaw: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }

    /// Maps a point from this pose's local frame into the parent frame.
    #[inline]
    pub fn apply(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * px - s * py + self.x, s * px + c * py + self.y)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (x, y) = self.apply(other.x, other.y);
        Pose2::new(x, y, self.yaw + other.yaw)
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    /// Pose of frame `src` expressed in frame `dst`, with both given in a common parent.
    pub fn relative(src: &Pose2, dst: &Pose2) -> Pose2 {
        dst.inverse().compose(src)
    }
}

/// An oriented 3D box. `l` runs along the heading (`yaw`), `w` across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub class_id: u32,
    #[serde(default = "one")]
    pub confidence: f64,
}

fn one() -> f64 {
    1.0
}

impl Box3D {
    /// Ground-truth style box with confidence 1.
    pub fn new(center: [f64; 3], size_wlh: [f64; 3], yaw: f64, class_id: u32) -> Self {
        Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            w: size_wlh[0],
            l: size_wlh[1],
            h: size_wlh[2],
            yaw: normalize_angle(yaw),
            class_id,
            confidence: 1.0,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::DegenerateBox(format!("non-finite field in {self:?}")));
        }
        if self.w <= 0.0 || self.l <= 0.0 || self.h <= 0.0 {
            return Err(Error::DegenerateBox(format!(
                "non-positive size w={} l={} h={}",
                self.w, self.l, self.h
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::DegenerateBox(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }

    pub fn bottom(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn top(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let pose = Pose2 {
            x: self.cx,
            y: self.cy,
            yaw: self.yaw,
        };
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        [
            pose.apply(hl, hw),
            pose.apply(-hl, hw),
            pose.apply(-hl, -hw),
            pose.apply(hl, -hw),
        ]
    }
}

/// Re-expresses `b` through `pose`: the center is rotated by `pose.yaw` and
/// translated, the heading is offset by `pose.yaw`. Size, height and
/// confidence are untouched.
pub fn transform_box(b: &Box3D, pose: &Pose2) -> Box3D {
    let (cx, cy) = pose.apply(b.cx, b.cy);
    Box3D {
        cx,
        cy,
        yaw: normalize_angle(b.yaw + pose.yaw),
        ..*b
    }
}

type Pt = (f64, f64);

#[inline]
fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Shoelace area of a simple polygon (positive for counter-clockwise order).
pub fn polygon_area(poly: &[Pt]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

/// Sutherland–Hodgman clip of `subject` against the convex, counter-clockwise `clip`.
pub fn clip_convex(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut output: Vec<Pt> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let inside = |p: Pt| cross(a, b, p) >= -CLIP_EPS;
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (cur_in, prev_in) = (inside(cur), inside(prev));
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn line_intersection(p: Pt, q: Pt, a: Pt, b: Pt) -> Pt {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom.abs() < f64::MIN_POSITIVE {
        return q;
    }
    let t = dp / denom;
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

fn check_footprint(b: &Box3D) -> Result<()> {
    b.validate()?;
    if b.w * b.l <= 0.0 {
        return Err(Error::DegenerateBox("zero-area footprint".into()));
    }
    Ok(())
}

/// Area of the intersection of the two yaw-oriented footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> Result<f64> {
    check_footprint(a)?;
    check_footprint(b)?;
    // cheap reject on circumscribed circles
    let ra = 0.5 * a.w.hypot(a.l);
    let rb = 0.5 * b.w.hypot(b.l);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return Ok(0.0);
    }
    let clipped = clip_convex(&a.bev_corners(), &b.bev_corners());
    Ok(polygon_area(&clipped).max(0.0))
}

/// Bird's-eye-view IoU of two oriented boxes, ignoring z.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64> {
    let inter = bev_intersection_area(a, b)?;
    let union = a.w * a.l + b.w * b.l - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Full 3D IoU: footprint intersection times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    let inter_area = bev_intersection_area(a, b)?;
    let z_overlap = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0);
    let inter = inter_area * z_overlap;
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}
