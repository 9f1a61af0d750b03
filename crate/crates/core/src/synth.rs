//! Synthetic LiDAR sequences with exact ground truth and simulated detector
//! output.
//!
//! A scene is a set of axis-aligned point boxes standing on the ground
//! plane and moving in straight lines while the vehicle drives straight
//! ahead. A ring of pinhole cameras at the vehicle origin sees every
//! object either completely or not at all, and objects are kept apart in
//! azimuth so their masks never overlap. Detections are built from the
//! pixels the object points actually hit, then corrupted per the noise spec.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MIN_DEPTH;
use crate::model::io::{write_detections, write_frame, write_labels};
use crate::model::{
    rle_encode, CameraCalibration, DetectionRecord, Frame, PipelineConfig, PixelBox, Point3, PointLabels,
    RigidTransform,
};
use crate::upg::{extract_distribution, project_view};

pub const VEHICLE: usize = 0;
pub const PEDESTRIAN: usize = 1;
pub const CYCLIST: usize = 2;
pub const NUM_CLASSES: usize = 3;

const PROMPTS: [&str; 3] = ["car", "person", "bicycle"];
const SHOWN_SCORE: f64 = 0.85;
const OTHER_SCORE: (f64, f64) = (0.02, 0.25);
const MIN_POINT_Z: f64 = 0.05;
const GROUND_Z: (f64, f64) = (-0.3, -0.1);
const GROUND_RANGE: (f64, f64) = (3.0, 55.0);
const GROUND_CLEARANCE: f64 = 1.0;
const OBJECT_GAP: f64 = 1.0;
const AZIMUTH_GAP_DEG: f64 = 1.5;
const IMAGE_MARGIN: f64 = 1.0;
const PLACEMENT_ATTEMPTS: usize = 20_000;

/// Box extents `[length x, width y, height z]` in meters per class.
pub fn default_extents(class: usize) -> [f64; 3] {
    match class {
        VEHICLE => [4.2, 1.8, 1.5],
        PEDESTRIAN => [0.7, 0.7, 1.75],
        _ => [1.8, 0.6, 1.7],
    }
}

pub fn default_points(class: usize) -> usize {
    match class {
        VEHICLE => 3000,
        PEDESTRIAN => 400,
        _ => 600,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Probability that a detection shows a wrong class.
    pub label_flip_prob: f64,
    pub detection_drop_prob: f64,
    /// Square dilation radius applied to every mask, in pixels.
    pub mask_dilation: u32,
    pub score_noise_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            label_flip_prob: 0.0,
            detection_drop_prob: 0.0,
            mask_dilation: 0,
            score_noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    pub num_cameras: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            num_cameras: 6,
            width: 640,
            height: 400,
            focal: 250.0,
        }
    }
}

impl RigSpec {
    /// Cameras at the vehicle origin, evenly spaced in yaw from straight
    /// ahead.
    pub fn cameras(&self) -> Vec<CameraCalibration> {
        let k = Matrix3::new(
            self.focal,
            0.0,
            self.width as f64 / 2.0,
            0.0,
            self.focal,
            self.height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        (0..self.num_cameras)
            .map(|i| {
                let yaw = 2.0 * PI * i as f64 / self.num_cameras as f64;
                let (s, c) = yaw.sin_cos();
                let r = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
                CameraCalibration {
                    view_id: format!("cam_{i}"),
                    intrinsics: k,
                    extrinsics: RigidTransform::from_rotation_translation(r, Vector3::zeros()),
                    width: self.width,
                    height: self.height,
                }
            })
            .collect()
    }
}

/// One object on a straight-line world trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class: usize,
    pub extents: [f64; 3],
    /// World xy of the footprint center at frame 0.
    pub start: [f64; 2],
    /// World xy displacement per frame.
    pub velocity: [f64; 2],
    pub points: usize,
}

impl ObjectSpec {
    pub fn center(&self, frame: usize) -> [f64; 2] {
        let t = frame as f64;
        [self.start[0] + t * self.velocity[0], self.start[1] + t * self.velocity[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    /// Number of randomly placed objects, classes assigned round-robin.
    /// Ignored when `objects` is given.
    pub num_objects: usize,
    pub objects: Option<Vec<ObjectSpec>>,
    pub background_points: usize,
    pub noise: NoiseSpec,
    pub rig: RigSpec,
    /// Meters per frame along `ego_heading`.
    pub ego_speed: f64,
    pub ego_heading: f64,
    pub frame_interval: f64,
    pub max_object_speed: f64,
    /// Horizontal range band for random object centers, in meters.
    pub min_range: f64,
    pub max_range: f64,
    pub embedding_dim: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_frames: 5,
            num_objects: 20,
            objects: None,
            background_points: 3000,
            noise: NoiseSpec::default(),
            rig: RigSpec::default(),
            ego_speed: 0.5,
            ego_heading: 0.3,
            frame_interval: 0.1,
            max_object_speed: 0.1,
            min_range: 15.0,
            max_range: 45.0,
            embedding_dim: 16,
        }
    }
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let n = &self.noise;
        for (name, p) in [
            ("label_flip_prob", n.label_flip_prob),
            ("detection_drop_prob", n.detection_drop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("noise.{name} = {p} outside [0, 1]"));
            }
        }
        if !(n.score_noise_sigma >= 0.0 && n.score_noise_sigma.is_finite()) {
            return bad("noise.score_noise_sigma must be finite and non-negative".into());
        }
        if self.rig.num_cameras == 0 || self.rig.width < 3 || self.rig.height < 3 || !(self.rig.focal > 0.0) {
            return bad("rig needs cameras, an image of at least 3x3 and a positive focal length".into());
        }
        if !(0.0 < self.min_range && self.min_range < self.max_range && self.max_range.is_finite()) {
            return bad("need 0 < min_range < max_range".into());
        }
        for (name, v) in [
            ("ego_speed", self.ego_speed),
            ("ego_heading", self.ego_heading),
            ("frame_interval", self.frame_interval),
            ("max_object_speed", self.max_object_speed),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.max_object_speed < 0.0 || self.frame_interval <= 0.0 {
            return bad("max_object_speed must be >= 0 and frame_interval > 0".into());
        }
        if let Some(objects) = &self.objects {
            for (i, o) in objects.iter().enumerate() {
                if o.class >= NUM_CLASSES {
                    return bad(format!("objects[{i}].class {} >= {NUM_CLASSES}", o.class));
                }
                if o.extents.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                    return bad(format!("objects[{i}].extents must be positive"));
                }
                if o.extents[2] <= MIN_POINT_Z {
                    return bad(format!("objects[{i}] is shorter than {MIN_POINT_Z} m"));
                }
                if o.start.iter().chain(&o.velocity).any(|v| !v.is_finite()) {
                    return bad(format!("objects[{i}] trajectory must be finite"));
                }
            }
        }
        Ok(())
    }

    /// World ← vehicle at `frame`.
    pub fn ego_pose(&self, frame: usize) -> RigidTransform {
        let d = self.ego_speed * frame as f64;
        let (s, c) = self.ego_heading.sin_cos();
        RigidTransform::translation(d * c, d * s, 0.0).compose(&RigidTransform::rotation_z(self.ego_heading))
    }
}

/// A generated sequence. Index `f` of each vector belongs to frame `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub objects: Vec<ObjectSpec>,
    pub frames: Vec<Frame>,
    pub ground_truth: Vec<PointLabels>,
    pub detections: Vec<Vec<DetectionRecord>>,
}

fn box_corners(o: &ObjectSpec, frame: usize) -> [Vector3<f64>; 8] {
    let [cx, cy] = o.center(frame);
    let [l, w, h] = o.extents;
    let mut out = [Vector3::zeros(); 8];
    for (k, c) in out.iter_mut().enumerate() {
        let sx = if k & 1 == 0 { -0.5 } else { 0.5 };
        let sy = if k & 2 == 0 { -0.5 } else { 0.5 };
        let z = if k & 4 == 0 { MIN_POINT_Z } else { h };
        *c = Vector3::new(cx + sx * l, cy + sy * w, z);
    }
    out
}

#[derive(PartialEq)]
enum Visibility {
    Inside,
    Outside,
    Partial,
}

fn visibility(corners: &[Vector3<f64>], cam: &CameraCalibration) -> Visibility {
    let k = &cam.intrinsics;
    let planes = |p: &Vector3<f64>| {
        let c = cam.extrinsics.apply(p);
        let (u, v) = (k.row(0).dot(&c.transpose()), k.row(1).dot(&c.transpose()));
        let (w, h) = (cam.width as f64, cam.height as f64);
        [
            c.z - MIN_DEPTH,
            u - IMAGE_MARGIN * c.z,
            (w - IMAGE_MARGIN) * c.z - u,
            v - IMAGE_MARGIN * c.z,
            (h - IMAGE_MARGIN) * c.z - v,
        ]
    };
    let values: Vec<[f64; 5]> = corners.iter().map(planes).collect();
    if values.iter().all(|p| p.iter().all(|&x| x > 0.0)) {
        Visibility::Inside
    } else if (0..5).any(|j| values.iter().all(|p| p[j] < 0.0)) {
        Visibility::Outside
    } else {
        Visibility::Partial
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Center azimuth and half-width of the object's angular interval as seen
/// from the vehicle origin.
fn azimuth_interval(corners_vehicle: &[Vector3<f64>]) -> (f64, f64) {
    let (sx, sy) = corners_vehicle.iter().fold((0.0, 0.0), |(x, y), c| (x + c.x, y + c.y));
    let center = sy.atan2(sx);
    let half = corners_vehicle
        .iter()
        .map(|c| wrap_angle(c.y.atan2(c.x) - center).abs())
        .fold(0.0, f64::max);
    (center, half)
}

fn to_vehicle(spec: &SceneSpec, frame: usize, world: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
    let inv = spec.ego_pose(frame).inverse()?;
    Ok(world.iter().map(|p| inv.apply(p)).collect())
}

fn footprint_gap(a: &ObjectSpec, b: &ObjectSpec, frame: usize) -> f64 {
    let (ca, cb) = (a.center(frame), b.center(frame));
    let gx = (ca[0] - cb[0]).abs() - (a.extents[0] + b.extents[0]) / 2.0;
    let gy = (ca[1] - cb[1]).abs() - (a.extents[1] + b.extents[1]) / 2.0;
    gx.max(gy)
}

fn placement_ok(spec: &SceneSpec, cams: &[CameraCalibration], o: &ObjectSpec, placed: &[ObjectSpec]) -> Result<bool> {
    for f in 0..spec.num_frames.max(1) {
        let corners = to_vehicle(spec, f, &box_corners(o, f))?;
        let [cx, cy] = o.center(f);
        let local = spec.ego_pose(f).inverse()?.apply(&Vector3::new(cx, cy, 0.0));
        let range = local.x.hypot(local.y);
        if range < spec.min_range || range > spec.max_range {
            return Ok(false);
        }
        let mut seen = false;
        for cam in cams {
            match visibility(&corners, cam) {
                Visibility::Partial => return Ok(false),
                Visibility::Inside => seen = true,
                Visibility::Outside => {}
            }
        }
        if !seen {
            return Ok(false);
        }
        let (ca, ha) = azimuth_interval(&corners);
        for other in placed {
            if footprint_gap(o, other, f) < OBJECT_GAP {
                return Ok(false);
            }
            let (cb, hb) = azimuth_interval(&to_vehicle(spec, f, &box_corners(other, f))?);
            if wrap_angle(ca - cb).abs() - ha - hb < AZIMUTH_GAP_DEG.to_radians() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Randomly place `spec.num_objects` objects satisfying the visibility and
/// separation constraints in every frame.
pub fn sample_objects(spec: &SceneSpec) -> Result<Vec<ObjectSpec>> {
    let cams = spec.rig.cameras();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placed: Vec<ObjectSpec> = Vec::with_capacity(spec.num_objects);
    for i in 0..spec.num_objects {
        let class = i % NUM_CLASSES;
        let mut found = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            // uniform over the annulus area around the frame-0 vehicle
            let r = (rng.random_range(spec.min_range.powi(2)..spec.max_range.powi(2))).sqrt();
            let az = rng.random_range(-PI..PI);
            let speed = rng.random_range(0.0..=spec.max_object_speed);
            let dir = rng.random_range(-PI..PI);
            let o = ObjectSpec {
                class,
                extents: default_extents(class),
                start: [r * az.cos(), r * az.sin()],
                velocity: [speed * dir.cos(), speed * dir.sin()],
                points: default_points(class),
            };
            if placement_ok(spec, &cams, &o, &placed)? {
                found = Some(o);
                break;
            }
        }
        match found {
            Some(o) => placed.push(o),
            None => {
                return Err(Error::InvalidSpec(format!(
                    "could not place object {i} after {PLACEMENT_ATTEMPTS} attempts"
                )))
            }
        }
    }
    Ok(placed)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Option<Vec<f64>> {
    if dim == 0 {
        return None;
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return Some(v.into_iter().map(|x| x / n).collect());
        }
    }
}

/// A subset of an object's points shown to the detector as one class.
struct Part {
    object: usize,
    prompt: usize,
    points: Vec<usize>,
}

fn object_parts(objects: &[ObjectSpec], ranges: &[(usize, usize)], points: &[Point3]) -> Vec<Part> {
    let mut parts = Vec::new();
    for (k, o) in objects.iter().enumerate() {
        let idx: Vec<usize> = (ranges[k].0..ranges[k].1).collect();
        match o.class {
            CYCLIST => {
                let half = (o.extents[2] / 2.0) as f32;
                let (lower, upper): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| points[i].z < half);
                parts.push(Part {
                    object: k,
                    prompt: 2,
                    points: lower,
                });
                parts.push(Part {
                    object: k,
                    prompt: 1,
                    points: upper,
                });
            }
            class => parts.push(Part {
                object: k,
                prompt: class,
                points: idx,
            }),
        }
    }
    parts
}

#[allow(clippy::too_many_arguments)]
fn build_detection(
    cam: &CameraCalibration,
    pixels: &[Option<(u32, u32)>],
    part: &Part,
    shown: usize,
    spec: &SceneSpec,
    mapping: &BTreeMap<String, usize>,
    embedding: Option<&Vec<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<DetectionRecord>> {
    let (w, h) = (cam.width, cam.height);
    let mut bitmap = vec![false; (w * h) as usize];
    let d = spec.noise.mask_dilation as i64;
    let mut any = false;
    for &i in &part.points {
        let Some((u, v)) = pixels[i] else { continue };
        any = true;
        for dv in -d..=d {
            for du in -d..=d {
                let (uu, vv) = (u as i64 + du, v as i64 + dv);
                if uu >= 0 && vv >= 0 && uu < w as i64 && vv < h as i64 {
                    bitmap[(vv as u32 * w + uu as u32) as usize] = true;
                }
            }
        }
    }
    if !any {
        return Ok(None);
    }
    let (mut umin, mut vmin, mut umax, mut vmax) = (u32::MAX, u32::MAX, 0, 0);
    for (k, _) in bitmap.iter().enumerate().filter(|(_, b)| **b) {
        let (u, v) = (k as u32 % w, k as u32 / w);
        umin = umin.min(u);
        vmin = vmin.min(v);
        umax = umax.max(u);
        vmax = vmax.max(v);
    }
    let sigma = spec.noise.score_noise_sigma;
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut prompt_scores = BTreeMap::new();
    for (p, name) in PROMPTS.iter().enumerate() {
        let base = if p == shown {
            SHOWN_SCORE
        } else {
            rng.random_range(OTHER_SCORE.0..OTHER_SCORE.1)
        };
        let s = if sigma > 0.0 { base + noise.sample(rng) } else { base };
        prompt_scores.insert(name.to_string(), s.clamp(0.0, 1.0));
    }
    let (class_distribution, confidence) = extract_distribution(&prompt_scores, mapping, NUM_CLASSES)?;
    Ok(Some(DetectionRecord {
        view_id: cam.view_id.clone(),
        bbox: PixelBox::new(umin as f64, vmin as f64, umax as f64 + 1.0, vmax as f64 + 1.0),
        prompt_scores,
        class_distribution,
        confidence,
        mask: rle_encode(&bitmap, w, h)?,
        embedding: embedding.cloned(),
    }))
}

fn generate_frame(
    spec: &SceneSpec,
    objects: &[ObjectSpec],
    embeddings: &[Option<Vec<f64>>],
    cams: &[CameraCalibration],
    f: usize,
) -> Result<(Frame, PointLabels, Vec<DetectionRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(f as u64 + 1);
    let ego = spec.ego_pose(f);
    let inv = ego.inverse()?;
    let mut points = Vec::new();
    let mut ranges = Vec::with_capacity(objects.len());
    let mut gt_rows: Vec<(usize, usize)> = Vec::new();
    for (k, o) in objects.iter().enumerate() {
        let [cx, cy] = o.center(f);
        let [l, w, h] = o.extents;
        let start = points.len();
        for _ in 0..o.points {
            let world = Vector3::new(
                cx + rng.random_range(-0.5..0.5) * l,
                cy + rng.random_range(-0.5..0.5) * w,
                rng.random_range(MIN_POINT_Z..h),
            );
            let p = inv.apply(&world);
            points.push(Point3::new(p.x as f32, p.y as f32, p.z as f32, rng.random_range(0.0..1.0)));
            gt_rows.push((k, o.class));
        }
        ranges.push((start, points.len()));
    }
    let footprints: Vec<([f64; 2], [f64; 3])> = objects.iter().map(|o| (o.center(f), o.extents)).collect();
    let mut placed = 0;
    while placed < spec.background_points {
        let r = rng.random_range(GROUND_RANGE.0.powi(2)..GROUND_RANGE.1.powi(2)).sqrt();
        let az = rng.random_range(-PI..PI);
        let local = Vector3::new(r * az.cos(), r * az.sin(), rng.random_range(GROUND_Z.0..GROUND_Z.1));
        let world = ego.apply(&local);
        let near = footprints.iter().any(|([cx, cy], e)| {
            (world.x - cx).abs() - e[0] / 2.0 < GROUND_CLEARANCE && (world.y - cy).abs() - e[1] / 2.0 < GROUND_CLEARANCE
        });
        if near {
            continue;
        }
        points.push(Point3::new(local.x as f32, local.y as f32, local.z as f32, rng.random_range(0.0..1.0)));
        placed += 1;
    }

    let mut gt = PointLabels::background(points.len(), NUM_CLASSES);
    for (i, &(k, class)) in gt_rows.iter().enumerate() {
        let mut row = [0.0f32; NUM_CLASSES];
        row[class] = 1.0;
        gt.set_point(i, k as i32, 1.0, &row);
    }

    let frame = Frame {
        frame_id: format!("frame_{f:04}"),
        timestamp: f as f64 * spec.frame_interval,
        points,
        ego_pose: ego,
        cameras: cams.to_vec(),
    };
    let positions = frame.positions();
    let parts = object_parts(objects, &ranges, &frame.points);
    let mapping = PipelineConfig::default().prompt_to_class;
    let mut detections = Vec::new();
    for cam in cams {
        let pixels = project_view(&positions, cam);
        for part in &parts {
            let fully_visible = !part.points.is_empty() && part.points.iter().all(|&i| pixels[i].is_some());
            if !fully_visible {
                continue;
            }
            let drop = rng.random_bool(spec.noise.detection_drop_prob);
            let flip = rng.random_bool(spec.noise.label_flip_prob);
            let shown = if flip {
                (part.prompt + rng.random_range(1..PROMPTS.len())) % PROMPTS.len()
            } else {
                part.prompt
            };
            let det = build_detection(cam, &pixels, part, shown, spec, &mapping, embeddings[part.object].as_ref(), &mut rng)?;
            if let (Some(det), false) = (det, drop) {
                detections.push(det);
            }
        }
    }
    Ok((frame, gt, detections))
}

/// Generate a full sequence. Frames are produced in parallel from
/// per-frame random streams, so the output is a pure function of `spec`.
pub fn generate_sequence(spec: &SceneSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let objects = match &spec.objects {
        Some(o) => o.clone(),
        None => sample_objects(spec)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let embeddings: Vec<Option<Vec<f64>>> = objects.iter().map(|_| unit_vector(&mut rng, spec.embedding_dim)).collect();
    let cams = spec.rig.cameras();
    let frames: Vec<(Frame, PointLabels, Vec<DetectionRecord>)> = (0..spec.num_frames)
        .into_par_iter()
        .map(|f| generate_frame(spec, &objects, &embeddings, &cams, f))
        .collect::<Result<_>>()?;
    let mut seq = SyntheticSequence {
        objects,
        frames: Vec::with_capacity(frames.len()),
        ground_truth: Vec::with_capacity(frames.len()),
        detections: Vec::with_capacity(frames.len()),
    };
    for (frame, gt, dets) in frames {
        seq.frames.push(frame);
        seq.ground_truth.push(gt);
        seq.detections.push(dets);
    }
    Ok(seq)
}

/// Write `frames/`, `detections/` and `gt/` under `out`, one file per frame
/// named by frame id.
pub fn write_sequence(seq: &SyntheticSequence, out: &Path) -> Result<()> {
    for dir in ["frames", "detections", "gt"] {
        fs::create_dir_all(out.join(dir)).map_err(|e| Error::from(e).at(out.join(dir)))?;
    }
    for ((frame, gt), dets) in seq.frames.iter().zip(&seq.ground_truth).zip(&seq.detections) {
        let id = &frame.frame_id;
        write_frame(&out.join("frames").join(format!("{id}.alf")), frame)?;
        write_labels(&out.join("gt").join(format!("{id}.all")), gt)?;
        write_detections(&out.join("detections").join(format!("{id}.json")), dets)?;
    }
    Ok(())
}

/// Resample each labeled point's class uniformly among the other classes
/// with probability `flip_prob`, swapping the old and new distribution
/// entries so the row's argmax follows the class.
pub fn corrupt_labels(labels: &PointLabels, flip_prob: f64, seed: u64) -> Result<PointLabels> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::InvalidArgument {
            arg: "flip_prob",
            reason: format!("{flip_prob} outside [0, 1]"),
        });
    }
    let mut out = labels.clone();
    let c = labels.num_classes;
    if c < 2 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..labels.len() {
        if !labels.is_labeled(i) || !rng.random_bool(flip_prob) {
            continue;
        }
        let old = labels.class_id[i] as usize;
        let new = (old + rng.random_range(1..c)) % c;
        out.row_mut(i).swap(old, new);
        out.class_id[i] = new as i32;
    }
    Ok(out)
}
