//! Domain records shared by every pipeline stage: frames, camera
//! calibrations, 2D detections, per-point labels and the pipeline
//! configuration, together with their validation rules and on-disk formats.

mod config;
pub mod io;
mod rle;

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{
    EvalConfig, LossConfig, PipelineConfig, RiderMergeConfig, VerticalRule, VoteMode, VsvConfig,
};
pub use rle::{rle_decode, rle_encode, MaskLookup, RleMask};

/// Tolerance on `RᵀR = I` for pose and extrinsic rotation blocks.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Tolerance on `confidence == max(class_distribution)`.
pub const CONFIDENCE_TOLERANCE: f64 = 1e-9;

/// One LiDAR return in the sensor (vehicle) frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point3 {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self {
            x,
            y,
            z,
            intensity,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x as f64, self.y as f64, self.z as f64)
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// 4×4 homogeneous rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform(Matrix4<f64>);

impl RigidTransform {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Self {
        Self(m)
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Self {
        Self(Matrix4::from_fn(|r, c| rows[r][c]))
    }

    pub fn from_rotation_translation(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self(m)
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self::from_rotation_translation(Matrix3::identity(), Vector3::new(x, y, z))
    }

    /// Rotation about +z by `angle` radians.
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self::from_rotation_translation(r, Vector3::zeros())
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.0[(r, c)];
            }
        }
        rows
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation_part()
    }

    /// Describes why the matrix is not rigid, or `None` when it is.
    pub fn rigidity_violation(&self) -> Option<String> {
        if self.0.iter().any(|v| !v.is_finite()) {
            return Some("non-finite entry".into());
        }
        let bottom = self.0.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Some("bottom row is not [0 0 0 1]".into());
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ROTATION_TOLERANCE {
            return Some(format!("rotation not orthonormal (|RᵀR−I|∞ = {err:.3e})"));
        }
        if r.determinant() < 0.0 {
            return Some("rotation is a reflection".into());
        }
        None
    }

    /// Analytic rigid inverse `[Rᵀ | −Rᵀt]`.
    pub fn inverse(&self) -> Result<Self> {
        if let Some(why) = self.rigidity_violation() {
            return Err(Error::SingularPose(why));
        }
        let rt = self.rotation().transpose();
        Ok(Self::from_rotation_translation(rt, -(rt * self.translation_part())))
    }

    pub fn compose(&self, rhs: &RigidTransform) -> RigidTransform {
        RigidTransform(self.0 * rhs.0)
    }

    pub fn apply_homogeneous(&self, p: &Vector3<f64>) -> Vector4<f64> {
        self.0 * Vector4::new(p.x, p.y, p.z, 1.0)
    }
}

/// Pinhole calibration of one camera view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalibration {
    pub view_id: String,
    /// 3×3 intrinsic matrix in pixels.
    pub intrinsics: Matrix3<f64>,
    /// camera ← LiDAR.
    pub extrinsics: RigidTransform,
    pub width: u32,
    pub height: u32,
}

impl CameraCalibration {
    fn violations(&self, prefix: &str, out: &mut Vec<Violation>) {
        let k = &self.intrinsics;
        if k[(2, 2)] != 1.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            out.push(Violation::new(format!("{prefix}.intrinsics"), "last row must be [0 0 1]"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            out.push(Violation::new(format!("{prefix}.intrinsics"), "focal lengths must be positive"));
        }
        if k.iter().any(|v| !v.is_finite()) {
            out.push(Violation::new(format!("{prefix}.intrinsics"), "non-finite"));
        }
        if self.width == 0 || self.height == 0 {
            out.push(Violation::new(format!("{prefix}.size"), "width and height must be positive"));
        }
        if let Some(why) = self.extrinsics.rigidity_violation() {
            out.push(Violation::new(format!("{prefix}.extrinsics"), why));
        }
    }
}

/// One LiDAR sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: String,
    pub timestamp: f64,
    pub points: Vec<Point3>,
    /// world ← vehicle.
    pub ego_pose: RigidTransform,
    pub cameras: Vec<CameraCalibration>,
}

impl Frame {
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(Point3::position).collect()
    }

    pub fn camera(&self, view_id: &str) -> Option<&CameraCalibration> {
        self.cameras.iter().find(|c| c.view_id == view_id)
    }
}

/// A broken invariant, named by field and rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.field, self.rule)
    }
}

fn violations_to_error(violations: Vec<Violation>) -> Result<()> {
    if violations.is_empty() {
        Ok(())
    } else {
        let msg = violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::Invalid(msg))
    }
}

/// Lists every broken frame invariant; empty when the frame is well formed.
pub fn validate_frame(frame: &Frame) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, p) in frame.points.iter().enumerate() {
        if !p.is_finite() {
            out.push(Violation::new(format!("points[{i}]"), "non-finite"));
        } else if !(0.0..=1.0).contains(&p.intensity) {
            out.push(Violation::new(format!("points[{i}]"), "intensity outside [0, 1]"));
        }
    }
    if !frame.timestamp.is_finite() {
        out.push(Violation::new("timestamp", "non-finite"));
    }
    if let Some(why) = frame.ego_pose.rigidity_violation() {
        out.push(Violation::new("ego_pose", why));
    }
    if frame.cameras.is_empty() {
        out.push(Violation::new("cameras", "at least one camera required"));
    }
    for (i, cam) in frame.cameras.iter().enumerate() {
        cam.violations(&format!("cameras[{i}]"), &mut out);
    }
    out
}

pub fn check_frame(frame: &Frame) -> Result<()> {
    violations_to_error(validate_frame(frame))
}

/// Axis-aligned image box `(u_min, v_min, u_max, v_max)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl PixelBox {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Self {
        Self {
            u_min,
            v_min,
            u_max,
            v_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.u_min + self.u_max),
            0.5 * (self.v_min + self.v_max),
        )
    }

    pub fn union(&self, other: &PixelBox) -> PixelBox {
        PixelBox::new(
            self.u_min.min(other.u_min),
            self.v_min.min(other.v_min),
            self.u_max.max(other.u_max),
            self.v_max.max(other.v_max),
        )
    }
}

impl From<[f64; 4]> for PixelBox {
    fn from(a: [f64; 4]) -> Self {
        PixelBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        [b.u_min, b.v_min, b.u_max, b.v_max]
    }
}

/// One 2D detection from the upstream detector/segmenter, reduced to a
/// single mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub view_id: String,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub prompt_scores: BTreeMap<String, f64>,
    pub class_distribution: Vec<f64>,
    pub confidence: f64,
    pub mask: RleMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl DetectionRecord {
    /// Index of the highest class probability (lowest index on ties).
    pub fn top_class(&self) -> Option<usize> {
        if self.class_distribution.is_empty() {
            None
        } else {
            Some(argmax(&self.class_distribution))
        }
    }
}

pub fn validate_detection(
    det: &DetectionRecord,
    camera: Option<&CameraCalibration>,
    num_classes: usize,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let b = det.bbox;
    if ![b.u_min, b.v_min, b.u_max, b.v_max].iter().all(|v| v.is_finite()) {
        out.push(Violation::new("box", "non-finite"));
    } else if !(b.u_min <= b.u_max && b.v_min <= b.v_max) {
        out.push(Violation::new("box", "not well ordered"));
    }
    match camera {
        None => out.push(Violation::new("view_id", format!("unknown view `{}`", det.view_id))),
        Some(cam) => {
            if b.u_min < 0.0 || b.v_min < 0.0 || b.u_max > cam.width as f64 || b.v_max > cam.height as f64 {
                out.push(Violation::new("box", "outside image"));
            }
            if det.mask.width != cam.width || det.mask.height != cam.height {
                out.push(Violation::new("mask", "dimensions differ from camera"));
            }
        }
    }
    if det.mask.check().is_err() {
        out.push(Violation::new("mask.runs", "run total differs from width·height"));
    }
    if det.class_distribution.len() != num_classes {
        out.push(Violation::new(
            "class_distribution",
            format!("length {} but {num_classes} classes", det.class_distribution.len()),
        ));
    }
    if det
        .class_distribution
        .iter()
        .any(|p| !(0.0..=1.0).contains(p))
    {
        out.push(Violation::new("class_distribution", "entry outside [0, 1]"));
    }
    for (prompt, s) in &det.prompt_scores {
        if !(0.0..=1.0).contains(s) {
            out.push(Violation::new(format!("prompt_scores[{prompt}]"), "outside [0, 1]"));
        }
    }
    let max = det.class_distribution.iter().copied().fold(0.0, f64::max);
    if !((det.confidence - max).abs() <= CONFIDENCE_TOLERANCE) {
        out.push(Violation::new("confidence", "differs from max(class_distribution)"));
    }
    if let Some(e) = &det.embedding {
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= 1e-6) {
            out.push(Violation::new("embedding", "not unit norm"));
        }
    }
    out
}

pub fn check_detection(
    det: &DetectionRecord,
    camera: Option<&CameraCalibration>,
    num_classes: usize,
) -> Result<()> {
    violations_to_error(validate_detection(det, camera, num_classes))
}

/// Index of the first maximal entry.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-point pseudo-labels. Background is instance −1, class −1, zero
/// confidence and an all-zero distribution row.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLabels {
    pub num_classes: usize,
    pub instance_id: Vec<i32>,
    pub class_id: Vec<i32>,
    pub confidence: Vec<f32>,
    /// Row-major N×C.
    pub distribution: Vec<f32>,
}

impl PointLabels {
    pub fn background(n: usize, num_classes: usize) -> Self {
        Self {
            num_classes,
            instance_id: vec![-1; n],
            class_id: vec![-1; n],
            confidence: vec![0.0; n],
            distribution: vec![0.0; n * num_classes],
        }
    }

    pub fn len(&self) -> usize {
        self.class_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_id.is_empty()
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.class_id[i] >= 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.distribution[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.num_classes;
        &mut self.distribution[i * c..(i + 1) * c]
    }

    /// Set point `i` to a labeled state, deriving the class from the row.
    pub fn set_point(&mut self, i: usize, instance: i32, confidence: f32, row: &[f32]) {
        self.instance_id[i] = instance;
        self.confidence[i] = confidence;
        self.row_mut(i).copy_from_slice(row);
        self.class_id[i] = argmax(row) as i32;
    }

    pub fn labeled_count(&self) -> usize {
        self.class_id.iter().filter(|&&c| c >= 0).count()
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.class_id.len();
        let c = self.num_classes;
        if self.instance_id.len() != n || self.confidence.len() != n || self.distribution.len() != n * c {
            out.push(Violation::new("labels", "array lengths differ"));
            return out;
        }
        for i in 0..n {
            let class = self.class_id[i];
            let row = self.row(i);
            let conf = self.confidence[i];
            if class < -1 || class >= c as i32 {
                out.push(Violation::new(format!("class_id[{i}]"), "out of range"));
                continue;
            }
            if !(0.0..=1.0).contains(&conf) {
                out.push(Violation::new(format!("confidence[{i}]"), "outside [0, 1]"));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                out.push(Violation::new(format!("distribution[{i}]"), "entry outside [0, 1]"));
            }
            if class == -1 {
                if self.instance_id[i] != -1 {
                    out.push(Violation::new(format!("instance_id[{i}]"), "instance without class"));
                }
                if conf != 0.0 || row.iter().any(|&p| p != 0.0) {
                    out.push(Violation::new(format!("distribution[{i}]"), "background must be zero"));
                }
            } else if row.iter().any(|&p| p != 0.0) && argmax(row) as i32 != class {
                out.push(Violation::new(format!("class_id[{i}]"), "differs from argmax(distribution)"));
            }
            if self.instance_id[i] < -1 {
                out.push(Violation::new(format!("instance_id[{i}]"), "below -1"));
            }
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        violations_to_error(self.validate())
    }
}
