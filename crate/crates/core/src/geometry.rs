//! SE(2) poses, oriented 3D boxes and rotated-box IoU.
//!
//! All angles are kept wrapped to `(-pi, pi]`. Boxes are 7-DoF: a 3D center,
//! a `(length, width, height)` extent and a yaw about the vertical axis.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// A planar rigid pose `(x, y, yaw)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
        Self { x, y, yaw: wrap_angle(yaw) }
    }

    pub const fn identity() -> Self {
        Self { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    /// Group product `self ⊕ other`: `other` expressed in `self`'s frame, lifted out.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(self.x + c * other.x - s * other.y, self.y + s * other.x + c * other.y, self.yaw + other.yaw)
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn translation_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl fmt::Display for Pose2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.4}, {:.4}, {:.4})", self.x, self.y, self.yaw)
    }
}

/// Component-wise pose difference `a ⊖ b` with the yaw term wrapped.
pub fn pose_minus(a: &Pose2, b: &Pose2) -> [f64; 3] {
    [a.x - b.x, a.y - b.y, wrap_angle(a.yaw - b.yaw)]
}

/// Object category. Serialized as lowercase names; the discriminant is the class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum ObjectClass {
    Vehicle = 0,
    Pedestrian = 1,
    Truck = 2,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Vehicle, ObjectClass::Pedestrian, ObjectClass::Truck];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Truck => "truck",
        }
    }

    /// Nominal `(length, width, height)` in meters.
    pub fn nominal_size(self) -> [f64; 3] {
        match self {
            ObjectClass::Vehicle => [4.5, 1.9, 1.6],
            ObjectClass::Pedestrian => [0.8, 0.8, 1.75],
            ObjectClass::Truck => [10.0, 2.8, 3.4],
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An oriented 3D box with class label and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: [f64; 3],
    /// `(length, width, height)`, all strictly positive.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: ObjectClass,
    pub confidence: f64,
}

impl Detection {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class: ObjectClass, confidence: f64) -> Self {
        debug_assert!(size.iter().all(|s| *s > 0.0), "box sizes must be positive");
        Self { center, size, yaw: wrap_angle(yaw), class, confidence: confidence.clamp(0.0, 1.0) }
    }

    /// The planar pose `(cx, cy, yaw)` of the box.
    pub fn bev_pose(&self) -> Pose2 {
        Pose2::new(self.center[0], self.center[1], self.yaw)
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    /// Counter-clockwise BEV footprint corners.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.size[0];
        let hw = 0.5 * self.size[1];
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| [self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly])
    }

    fn z_interval(&self) -> (f64, f64) {
        let h = 0.5 * self.size[2];
        (self.center[2] - h, self.center[2] + h)
    }

    /// Returns a copy with the BEV pose replaced.
    pub fn with_bev_pose(&self, pose: &Pose2) -> Detection {
        Detection { center: [pose.x, pose.y, self.center[2]], yaw: pose.yaw, ..*self }
    }
}

/// Applies `pose` to a box: center rotated and translated, yaw offset; the rest untouched.
pub fn transform_detection(pose: &Pose2, d: &Detection) -> Detection {
    let [x, y] = pose.transform_point([d.center[0], d.center[1]]);
    Detection { center: [x, y, d.center[2]], yaw: wrap_angle(d.yaw + pose.yaw), ..*d }
}

/// Coordinate frame a detection set lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameTag {
    AgentLocal,
    EgoGlobal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub frame: FrameTag,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(frame: FrameTag, detections: Vec<Detection>) -> Self {
        Self { frame, detections }
    }

    pub fn empty(frame: FrameTag) -> Self {
        Self::new(frame, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Detection> {
        self.detections.iter()
    }

    /// Moves every box into the parent frame of `pose`, retagging the set.
    pub fn transformed(&self, pose: &Pose2, frame: FrameTag) -> DetectionSet {
        DetectionSet::new(frame, self.detections.iter().map(|d| transform_detection(pose, d)).collect())
    }
}

/// Which overlap measure to use for box matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Ground-plane footprint IoU only.
    Bev,
    /// Footprint intersection times vertical overlap, over the 3D union.
    #[default]
    BevTimesHeight,
}

/// Sutherland-Hodgman clip of a convex polygon against a convex CCW clipper.
fn clip_convex(subject: &[[f64; 2]], clipper: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clipper.len() {
        if output.is_empty() {
            break;
        }
        let a = clipper[i];
        let b = clipper[(i + 1) % clipper.len()];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    0.5 * twice.abs()
}

/// Area of the intersection of two box footprints.
pub fn bev_intersection_area(a: &Detection, b: &Detection) -> f64 {
    // Cheap reject on circumscribed circles.
    let r = 0.5 * (a.size[0].hypot(a.size[1]) + b.size[0].hypot(b.size[1]));
    let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
    if d >= r {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()))
}

pub fn bev_iou(a: &Detection, b: &Detection) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.bev_area() + b.bev_area() - inter)).clamp(0.0, 1.0)
}

/// 3D IoU of two yaw-only oriented boxes: footprint intersection times
/// vertical overlap, divided by the union volume.
pub fn iou_3d(a: &Detection, b: &Detection) -> f64 {
    let (a0, a1) = a.z_interval();
    let (b0, b1) = b.z_interval();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

pub fn iou(a: &Detection, b: &Detection, mode: IouMode) -> f64 {
    match mode {
        IouMode::Bev => bev_iou(a, b),
        IouMode::BevTimesHeight => iou_3d(a, b),
    }
}
