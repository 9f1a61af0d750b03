//! Command implementations behind the `plabel` binary.
//!
//! Each command reads its inputs, processes frames on a dedicated worker
//! pool, writes outputs in frame-id order and finishes with a
//! `manifest.json` describing the run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use plabel_core::eval::{evaluate, EvalReport};
use plabel_core::geometry::transform_points;
use plabel_core::losses::gradcheck::{check_all, Kernel, KernelReport};
use plabel_core::model::io::{read_detections, read_frame, read_labels, read_scores, write_labels};
use plabel_core::model::io::ScoreMatrix;
use plabel_core::model::{check_detection, check_frame, DetectionRecord, Frame, PipelineConfig, PointLabels};
use plabel_core::synth::{generate_sequence, write_sequence, SceneSpec};
use plabel_core::upg::generate_frame_labels;
use plabel_core::vsv::{nearest_frames, offline_refine, online_refine};

pub const FRAME_EXT: &str = "alf";
pub const LABELS_EXT: &str = "all";
pub const SCORES_EXT: &str = "als";
pub const DETECTIONS_EXT: &str = "json";
pub const MANIFEST: &str = "manifest.json";

/// An error the process should report with exit code 2.
#[derive(Debug)]
pub struct InvariantViolation(pub String);

impl fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invariant violation: {}", self.0)
    }
}

impl std::error::Error for InvariantViolation {}

/// 2 for invariant violations anywhere in the error chain, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<InvariantViolation>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<plabel_core::Error>() {
            if matches!(e, plabel_core::Error::Invalid(_) | plabel_core::Error::NoUsablePrototypes) {
                return 2;
            }
        }
    }
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    Offline,
    Online,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timings_ms: BTreeMap<String, u128>,
}

impl RunManifest {
    fn new(command: &str, config_text: &str) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: sha256_hex(config_text.as_bytes()),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings_ms.insert(stage.to_string(), start.elapsed().as_millis());
        Ok(out)
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            PipelineConfig::from_json(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    cfg.validate().context("config")?;
    Ok(cfg)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .context("building worker pool")
}

/// Files in `dir` with extension `ext`, keyed and sorted by file stem.
pub fn list_files(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for entry in entries {
        let path = entry.with_context(|| format!("listing {}", dir.display()))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_frames(dir: &Path, workers: usize) -> Result<Vec<Frame>> {
    let files: Vec<PathBuf> = list_files(dir, FRAME_EXT)?.into_values().collect();
    let mut frames: Vec<Frame> = pool(workers)?.install(|| {
        files
            .par_iter()
            .map(|p| {
                let frame = read_frame(p)?;
                check_frame(&frame).map_err(|e| e.at(p))?;
                Ok(frame)
            })
            .collect::<plabel_core::Result<Vec<_>>>()
    })?;
    frames.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    if let Some(w) = frames.windows(2).find(|w| w[0].frame_id == w[1].frame_id) {
        bail!("duplicate frame id `{}` in {}", w[0].frame_id, dir.display());
    }
    Ok(frames)
}

fn write_all_labels(out_dir: &Path, frames: &[Frame], labels: &[PointLabels]) -> Result<Vec<String>> {
    ensure_dir(out_dir)?;
    let mut written = Vec::with_capacity(frames.len());
    for (frame, l) in frames.iter().zip(labels) {
        let path = out_dir.join(format!("{}.{LABELS_EXT}", frame.frame_id));
        write_labels(&path, l)?;
        written.push(path.display().to_string());
    }
    Ok(written)
}

fn labels_for(dir: &Path, frames: &[Frame]) -> Result<Vec<PointLabels>> {
    frames
        .iter()
        .map(|f| {
            let path = dir.join(format!("{}.{LABELS_EXT}", f.frame_id));
            let l = read_labels(&path)?;
            if l.len() != f.points.len() {
                return Err(plabel_core::Error::SizeMismatch {
                    what: "labels",
                    expected: f.points.len(),
                    got: l.len(),
                }
                .at(&path)
                .into());
            }
            Ok(l)
        })
        .collect()
}

/// Lift detections onto every frame and write one label file per frame.
pub fn cmd_upg(
    frames_dir: &Path,
    detections_dir: &Path,
    cfg: &PipelineConfig,
    out_dir: &Path,
    workers: usize,
) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("upg", &cfg.canonical_json());
    manifest.input("frames", frames_dir);
    manifest.input("detections", detections_dir);
    let frames = manifest.time("load", || load_frames(frames_dir, workers))?;
    let det_files = list_files(detections_dir, DETECTIONS_EXT)?;
    let c = cfg.num_classes();
    let labels: Vec<PointLabels> = manifest.time("generate", || {
        pool(workers)?.install(|| {
            frames
                .par_iter()
                .map(|frame| {
                    let dets: Vec<DetectionRecord> = match det_files.get(&frame.frame_id) {
                        Some(p) => {
                            let dets = read_detections(p)?;
                            for d in &dets {
                                check_detection(d, frame.camera(&d.view_id), c).map_err(|e| e.at(p))?;
                            }
                            dets
                        }
                        None => Vec::new(),
                    };
                    let (labels, instances) = generate_frame_labels(frame, &dets, cfg)?;
                    info!("{}: {} detections, {} instances", frame.frame_id, dets.len(), instances.len());
                    Ok(labels)
                })
                .collect::<Result<Vec<_>>>()
        })
    })?;
    let outputs = manifest.time("write", || write_all_labels(&out_dir.join("labels"), &frames, &labels))?;
    manifest.outputs = outputs;
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Neighbor points aligned to `current` and the matching score rows.
fn aligned_neighbors(
    frames: &[Frame],
    current: usize,
    neighbors: &[usize],
    scores: &[ScoreMatrix],
) -> Result<(Vec<Vector3<f64>>, ScoreMatrix)> {
    let cols = scores.first().map_or(0, |s| s.cols);
    let mut points = Vec::new();
    let mut data = Vec::new();
    for &j in neighbors {
        points.extend(transform_points(&frames[j].positions(), &frames[j].ego_pose, &frames[current].ego_pose)?);
        data.extend_from_slice(&scores[j].data);
    }
    let rows = points.len();
    Ok((points, ScoreMatrix::new(rows, cols, data)?))
}

/// Refine labels with voxel voting over each frame's nearest neighbors in
/// time. Offline mode votes with neighbor labels, online mode with teacher
/// scores read from `scores_dir`.
pub fn cmd_refine(
    labels_dir: &Path,
    frames_dir: &Path,
    cfg: &PipelineConfig,
    mode: RefineMode,
    scores_dir: Option<&Path>,
    out_dir: &Path,
    workers: usize,
) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("refine", &cfg.canonical_json());
    manifest.input("labels", labels_dir);
    manifest.input("frames", frames_dir);
    let frames = manifest.time("load", || load_frames(frames_dir, workers))?;
    let labels = manifest.time("load_labels", || labels_for(labels_dir, &frames))?;
    let scores: Vec<ScoreMatrix> = match mode {
        RefineMode::Offline => Vec::new(),
        RefineMode::Online => {
            let dir = scores_dir.context("online mode requires --scores")?;
            manifest.input("scores", dir);
            frames
                .iter()
                .map(|f| {
                    let path = dir.join(format!("{}.{SCORES_EXT}", f.frame_id));
                    let s = read_scores(&path)?;
                    if s.rows != f.points.len() || s.cols != cfg.num_classes() {
                        bail!(
                            "{}: expected {}x{} scores, got {}x{}",
                            path.display(),
                            f.points.len(),
                            cfg.num_classes(),
                            s.rows,
                            s.cols
                        );
                    }
                    Ok(s)
                })
                .collect::<Result<_>>()?
        }
    };
    let timestamps: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
    let refined: Vec<PointLabels> = manifest.time("refine", || {
        pool(workers)?.install(|| {
            (0..frames.len())
                .into_par_iter()
                .map(|i| {
                    let neighbors = nearest_frames(&timestamps, i, cfg.ofr_frames);
                    let out = match mode {
                        RefineMode::Offline => {
                            let adjacent: Vec<(&Frame, &PointLabels)> =
                                neighbors.iter().map(|&j| (&frames[j], &labels[j])).collect();
                            offline_refine(&frames[i], &labels[i], &adjacent, cfg)?
                        }
                        RefineMode::Online => {
                            let (points, s) = aligned_neighbors(&frames, i, &neighbors, &scores)?;
                            online_refine(&frames[i], &labels[i], &points, &s, cfg)?
                        }
                    };
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()
        })
    })?;
    manifest.outputs = manifest.time("write", || write_all_labels(&out_dir.join("labels"), &frames, &refined))?;
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Score predicted labels against ground truth. Both directories must hold
/// the same frame set.
pub fn cmd_eval(
    pred_dir: &Path,
    gt_dir: &Path,
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
    workers: usize,
) -> Result<(EvalReport, Option<RunManifest>)> {
    let mut manifest = RunManifest::new("eval", &cfg.canonical_json());
    manifest.input("pred", pred_dir);
    manifest.input("gt", gt_dir);
    let preds = list_files(pred_dir, LABELS_EXT)?;
    let gts = list_files(gt_dir, LABELS_EXT)?;
    if preds.keys().ne(gts.keys()) {
        let only_pred: Vec<&String> = preds.keys().filter(|k| !gts.contains_key(*k)).collect();
        let only_gt: Vec<&String> = gts.keys().filter(|k| !preds.contains_key(*k)).collect();
        bail!("frame sets differ: only in predictions {only_pred:?}, only in ground truth {only_gt:?}");
    }
    let pairs: Vec<(PointLabels, PointLabels)> = manifest.time("load", || {
        pool(workers)?.install(|| {
            preds
                .iter()
                .collect::<Vec<_>>()
                .par_iter()
                .map(|(id, p)| Ok((read_labels(p)?, read_labels(&gts[*id])?)))
                .collect::<Result<Vec<_>>>()
        })
    })?;
    let refs: Vec<(&PointLabels, &PointLabels)> = pairs.iter().map(|(p, g)| (p, g)).collect();
    let report = manifest.time("evaluate", || {
        Ok(evaluate(&refs, &cfg.class_names, &cfg.eval.iou_thresholds)?)
    })?;
    let manifest = match out_dir {
        Some(dir) => {
            ensure_dir(dir)?;
            let json = dir.join("report.json");
            let table = dir.join("report.txt");
            fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")
                .with_context(|| format!("writing {}", json.display()))?;
            fs::write(&table, report.to_table()).with_context(|| format!("writing {}", table.display()))?;
            manifest.outputs = vec![json.display().to_string(), table.display().to_string()];
            manifest.write(dir)?;
            Some(manifest)
        }
        None => None,
    };
    Ok((report, manifest))
}

/// Generate a synthetic dataset: `frames/`, `detections/` and `gt/`.
pub fn cmd_synth(spec: &SceneSpec, out_dir: &Path) -> Result<RunManifest> {
    spec.validate()?;
    let mut manifest = RunManifest::new("synth", &serde_json::to_string(spec)?);
    let seq = manifest.time("generate", || Ok(generate_sequence(spec)?))?;
    manifest.time("write", || Ok(write_sequence(&seq, out_dir)?))?;
    manifest.outputs = ["frames", "detections", "gt"]
        .iter()
        .map(|d| out_dir.join(d).display().to_string())
        .collect();
    manifest.write(out_dir)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub seed: u64,
    pub trials: usize,
    pub kernels: Vec<KernelReport>,
    pub passed: bool,
}

/// Finite-difference check of every loss kernel.
pub fn cmd_losses_check(seed: u64, trials: usize, sign_flip: Option<Kernel>) -> Result<GradientReport> {
    if trials == 0 {
        bail!("--trials must be at least 1");
    }
    let kernels = check_all(seed, trials, sign_flip);
    let passed = kernels.iter().all(|k| k.passed);
    Ok(GradientReport {
        seed,
        trials,
        kernels,
        passed,
    })
}

/// Write a gradient report and its manifest, failing with an invariant
/// violation when any kernel is out of tolerance.
pub fn finish_losses_check(report: &GradientReport, out_dir: Option<&Path>) -> Result<()> {
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        let path = dir.join("gradients.json");
        fs::write(&path, serde_json::to_string_pretty(report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        let mut manifest = RunManifest::new("losses-check", &format!("{{\"seed\":{},\"trials\":{}}}", report.seed, report.trials));
        manifest.outputs.push(path.display().to_string());
        manifest.write(dir)?;
    }
    if !report.passed {
        let failed: Vec<&str> = report.kernels.iter().filter(|k| !k.passed).map(|k| k.kernel.name()).collect();
        return Err(InvariantViolation(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}
