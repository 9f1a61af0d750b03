//! On-disk containers. All numeric payloads are little-endian.
//!
//! Frame (`ALF1`):
//! ```text
//! magic "ALF1"
//! u32 id_len, id bytes (utf-8)
//! f64 timestamp
//! u32 num_points, u32 num_cameras
//! num_points × f32 [x, y, z, intensity]
//! 16 × f64 ego pose, row-major
//! per camera: u32 len, view id bytes, 9 × f64 K (row-major),
//!             16 × f64 T (row-major), u32 width, u32 height
//! ```
//! Labels (`ALL1`): `u32 N, u32 C`, then `i32×N` instance ids, `i32×N`
//! class ids, `f32×N` confidences, `f32×N·C` distributions.
//!
//! Scores (`ALS1`): `u32 N, u32 C`, then `f32×N·C` row-major.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::Matrix3;

use super::{CameraCalibration, DetectionRecord, Frame, Point3, PointLabels, RigidTransform};
use crate::error::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"ALF1";
pub const LABELS_MAGIC: &[u8; 4] = b"ALL1";
pub const SCORES_MAGIC: &[u8; 4] = b"ALS1";

pub const FRAME_EXT: &str = "alf";
pub const LABELS_EXT: &str = "all";
pub const SCORES_EXT: &str = "als";
pub const DETECTIONS_EXT: &str = "json";

/// Dense N×C matrix of per-point class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::SizeMismatch {
                what: "score matrix",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn truncated(format: &'static str) -> impl Fn(std::io::Error) -> Error {
    move |e| Error::format(format, format!("truncated payload ({e})"))
}

fn read_magic(cur: &mut Cursor<&[u8]>, magic: &[u8; 4], format: &'static str) -> Result<()> {
    let mut got = [0u8; 4];
    cur.read_exact(&mut got).map_err(truncated(format))?;
    if &got != magic {
        return Err(Error::format(format, format!("bad magic {got:?}")));
    }
    Ok(())
}

fn finish(cur: &Cursor<&[u8]>, format: &'static str) -> Result<()> {
    let extra = cur.get_ref().len() as u64 - cur.position();
    if extra != 0 {
        return Err(Error::format(format, format!("{extra} trailing bytes")));
    }
    Ok(())
}

fn read_string(cur: &mut Cursor<&[u8]>, format: &'static str) -> Result<String> {
    let len = cur.read_u32::<LE>().map_err(truncated(format))? as usize;
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if len > remaining {
        return Err(Error::format(format, "string length exceeds payload"));
    }
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf).map_err(truncated(format))?;
    String::from_utf8(buf).map_err(|_| Error::format(format, "string is not utf-8"))
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LE>(s.len() as u32).unwrap();
    out.write_all(s.as_bytes()).unwrap();
}

/// Guard allocation sizes against the bytes actually available.
fn check_len(cur: &Cursor<&[u8]>, count: usize, width: usize, format: &'static str) -> Result<()> {
    let remaining = cur.get_ref().len() - cur.position() as usize;
    match count.checked_mul(width) {
        Some(need) if need <= remaining => Ok(()),
        _ => Err(Error::format(format, "declared count exceeds payload")),
    }
}

fn read_f64s<const N: usize>(cur: &mut Cursor<&[u8]>, format: &'static str) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    cur.read_f64_into::<LE>(&mut out).map_err(truncated(format))?;
    Ok(out)
}

fn rows16(v: [f64; 16]) -> [[f64; 4]; 4] {
    let mut rows = [[0.0; 4]; 4];
    for (i, x) in v.into_iter().enumerate() {
        rows[i / 4][i % 4] = x;
    }
    rows
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + frame.points.len() * 16);
    out.extend_from_slice(FRAME_MAGIC);
    write_string(&mut out, &frame.frame_id);
    out.write_f64::<LE>(frame.timestamp).unwrap();
    out.write_u32::<LE>(frame.points.len() as u32).unwrap();
    out.write_u32::<LE>(frame.cameras.len() as u32).unwrap();
    for p in &frame.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.write_f32::<LE>(v).unwrap();
        }
    }
    for row in frame.ego_pose.rows() {
        for v in row {
            out.write_f64::<LE>(v).unwrap();
        }
    }
    for cam in &frame.cameras {
        write_string(&mut out, &cam.view_id);
        for r in 0..3 {
            for c in 0..3 {
                out.write_f64::<LE>(cam.intrinsics[(r, c)]).unwrap();
            }
        }
        for row in cam.extrinsics.rows() {
            for v in row {
                out.write_f64::<LE>(v).unwrap();
            }
        }
        out.write_u32::<LE>(cam.width).unwrap();
        out.write_u32::<LE>(cam.height).unwrap();
    }
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    const F: &str = "frame";
    let mut cur = Cursor::new(bytes);
    read_magic(&mut cur, FRAME_MAGIC, F)?;
    let frame_id = read_string(&mut cur, F)?;
    let timestamp = cur.read_f64::<LE>().map_err(truncated(F))?;
    let num_points = cur.read_u32::<LE>().map_err(truncated(F))? as usize;
    let num_cameras = cur.read_u32::<LE>().map_err(truncated(F))? as usize;
    check_len(&cur, num_points, 16, F)?;
    let mut raw = vec![0f32; num_points * 4];
    cur.read_f32_into::<LE>(&mut raw).map_err(truncated(F))?;
    let points = raw
        .chunks_exact(4)
        .map(|c| Point3::new(c[0], c[1], c[2], c[3]))
        .collect();
    let ego_pose = RigidTransform::from_rows(rows16(read_f64s::<16>(&mut cur, F)?));
    check_len(&cur, num_cameras, 4 + 25 * 8 + 8, F)?;
    let mut cameras = Vec::with_capacity(num_cameras);
    for _ in 0..num_cameras {
        let view_id = read_string(&mut cur, F)?;
        let k = read_f64s::<9>(&mut cur, F)?;
        let t = read_f64s::<16>(&mut cur, F)?;
        let width = cur.read_u32::<LE>().map_err(truncated(F))?;
        let height = cur.read_u32::<LE>().map_err(truncated(F))?;
        cameras.push(CameraCalibration {
            view_id,
            intrinsics: Matrix3::from_row_slice(&k),
            extrinsics: RigidTransform::from_rows(rows16(t)),
            width,
            height,
        });
    }
    finish(&cur, F)?;
    Ok(Frame {
        frame_id,
        timestamp,
        points,
        ego_pose,
        cameras,
    })
}

pub fn encode_labels(labels: &PointLabels) -> Vec<u8> {
    let n = labels.len();
    let mut out = Vec::with_capacity(12 + n * (12 + 4 * labels.num_classes));
    out.extend_from_slice(LABELS_MAGIC);
    out.write_u32::<LE>(n as u32).unwrap();
    out.write_u32::<LE>(labels.num_classes as u32).unwrap();
    for &v in &labels.instance_id {
        out.write_i32::<LE>(v).unwrap();
    }
    for &v in &labels.class_id {
        out.write_i32::<LE>(v).unwrap();
    }
    for &v in &labels.confidence {
        out.write_f32::<LE>(v).unwrap();
    }
    for &v in &labels.distribution {
        out.write_f32::<LE>(v).unwrap();
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<PointLabels> {
    const F: &str = "labels";
    let mut cur = Cursor::new(bytes);
    read_magic(&mut cur, LABELS_MAGIC, F)?;
    let n = cur.read_u32::<LE>().map_err(truncated(F))? as usize;
    let c = cur.read_u32::<LE>().map_err(truncated(F))? as usize;
    check_len(&cur, n, 12 + 4 * c, F)?;
    let mut instance_id = vec![0i32; n];
    cur.read_i32_into::<LE>(&mut instance_id).map_err(truncated(F))?;
    let mut class_id = vec![0i32; n];
    cur.read_i32_into::<LE>(&mut class_id).map_err(truncated(F))?;
    let mut confidence = vec![0f32; n];
    cur.read_f32_into::<LE>(&mut confidence).map_err(truncated(F))?;
    let mut distribution = vec![0f32; n * c];
    cur.read_f32_into::<LE>(&mut distribution).map_err(truncated(F))?;
    finish(&cur, F)?;
    Ok(PointLabels {
        num_classes: c,
        instance_id,
        class_id,
        confidence,
        distribution,
    })
}

pub fn encode_scores(scores: &ScoreMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + scores.data.len() * 4);
    out.extend_from_slice(SCORES_MAGIC);
    out.write_u32::<LE>(scores.rows as u32).unwrap();
    out.write_u32::<LE>(scores.cols as u32).unwrap();
    for &v in &scores.data {
        out.write_f32::<LE>(v).unwrap();
    }
    out
}

pub fn decode_scores(bytes: &[u8]) -> Result<ScoreMatrix> {
    const F: &str = "scores";
    let mut cur = Cursor::new(bytes);
    read_magic(&mut cur, SCORES_MAGIC, F)?;
    let rows = cur.read_u32::<LE>().map_err(truncated(F))? as usize;
    let cols = cur.read_u32::<LE>().map_err(truncated(F))? as usize;
    check_len(&cur, rows, 4 * cols, F)?;
    let mut data = vec![0f32; rows * cols];
    cur.read_f32_into::<LE>(&mut data).map_err(truncated(F))?;
    finish(&cur, F)?;
    ScoreMatrix::new(rows, cols, data)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::from(e).at(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::from(e).at(path))
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    decode_frame(&read_file(path)?).map_err(|e| e.at(path))
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    write_file(path, &encode_frame(frame))
}

pub fn read_labels(path: &Path) -> Result<PointLabels> {
    decode_labels(&read_file(path)?).map_err(|e| e.at(path))
}

pub fn write_labels(path: &Path, labels: &PointLabels) -> Result<()> {
    write_file(path, &encode_labels(labels))
}

pub fn read_scores(path: &Path) -> Result<ScoreMatrix> {
    decode_scores(&read_file(path)?).map_err(|e| e.at(path))
}

pub fn write_scores(path: &Path, scores: &ScoreMatrix) -> Result<()> {
    write_file(path, &encode_scores(scores))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::from(e).at(path))
}

pub fn write_detections(path: &Path, detections: &[DetectionRecord]) -> Result<()> {
    let text = serde_json::to_vec(detections)?;
    write_file(path, &text)
}
