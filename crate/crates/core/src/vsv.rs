//! Voxel-based semantic voting and the offline/online refinement passes
//! built on it.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{transform_points, voxelize, VoxelKey};
use crate::model::io::ScoreMatrix;
use crate::model::{argmax, Frame, PipelineConfig, PointLabels, VoteMode, VsvConfig};

/// Tolerance on ema score rows summing to one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-4;

/// Points and per-class scores that cast votes. `scores` is row-major N×C.
#[derive(Debug, Clone, Copy)]
pub struct VotingInput<'a> {
    pub points: &'a [Vector3<f64>],
    pub scores: &'a [f32],
    pub num_classes: usize,
}

impl VotingInput<'_> {
    fn check(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument {
                arg: "num_classes",
                reason: "must be at least 1".into(),
            });
        }
        if self.scores.len() != self.points.len() * self.num_classes {
            return Err(Error::SizeMismatch {
                what: "voting scores",
                expected: self.points.len() * self.num_classes,
                got: self.scores.len(),
            });
        }
        if let Some(bad) = self.scores.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidArgument {
                arg: "scores",
                reason: format!("row {} has a negative or non-finite entry", bad / self.num_classes),
            });
        }
        Ok(())
    }
}

/// Winning class per voxel; voxels without a vote are absent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VoteMap {
    pub num_classes: usize,
    votes: HashMap<VoxelKey, u32>,
}

impl VoteMap {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            votes: HashMap::new(),
        }
    }

    /// Voted class, or −1.
    pub fn get(&self, key: &VoxelKey) -> i32 {
        self.votes.get(key).map_or(-1, |&c| c as i32)
    }

    pub fn insert(&mut self, key: VoxelKey, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::InvalidArgument {
                arg: "class",
                reason: format!("{class} >= {}", self.num_classes),
            });
        }
        self.votes.insert(key, class as u32);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.votes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.votes.is_empty()
    }

    pub fn sorted_entries(&self) -> Vec<(VoxelKey, usize)> {
        let mut out: Vec<_> = self.votes.iter().map(|(k, &c)| (*k, c as usize)).collect();
        out.sort_unstable();
        out
    }
}

fn voting_row(row: &[f32], mode: VoteMode, out: &mut [f64]) {
    match mode {
        VoteMode::Distribution => {
            for (o, &s) in out.iter_mut().zip(row) {
                *o = s as f64;
            }
        }
        VoteMode::OneHot => {
            out.fill(0.0);
            if row.iter().any(|&s| s != 0.0) {
                out[argmax(row)] = 1.0;
            }
        }
    }
}

/// Count threshold scaled by the voxel's distance from the ego voxel.
pub fn scaled_count_threshold(key: &VoxelKey, ego: &VoxelKey, voxel_size: f64, cfg: &VsvConfig) -> f64 {
    let dist = key.center_distance(ego, voxel_size).max(voxel_size);
    cfg.reference_distance / dist * cfg.count_threshold
}

/// Builds the voxel voting space.
///
/// A voxel votes for the argmax of its mean score row (lowest class on
/// ties) when that maximum reaches the score threshold and its point count
/// reaches the distance-scaled count threshold. Rows are summed in a
/// canonical order, so the map does not depend on point order.
pub fn build_voting_space(
    input: &VotingInput,
    voxel_size: f64,
    ego: VoxelKey,
    cfg: &VsvConfig,
) -> Result<VoteMap> {
    input.check()?;
    let c = input.num_classes;
    let buckets = voxelize(input.points, voxel_size)?;
    let mut map = VoteMap::new(c);
    let mut rows: Vec<&[f32]> = Vec::new();
    let mut sum = vec![0.0f64; c];
    let mut row = vec![0.0f64; c];
    for (key, members) in &buckets {
        let n = members.len();
        if (n as f64) < scaled_count_threshold(key, &ego, voxel_size, cfg) {
            continue;
        }
        rows.clear();
        rows.extend(members.iter().map(|&i| &input.scores[i * c..(i + 1) * c]));
        rows.sort_unstable_by(|a, b| a.iter().map(|v| v.to_bits()).cmp(b.iter().map(|v| v.to_bits())));
        sum.fill(0.0);
        for r in &rows {
            voting_row(r, cfg.vote_mode, &mut row);
            for (s, v) in sum.iter_mut().zip(&row) {
                *s += v;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let best = argmax(&mean);
        if mean[best] >= cfg.score_threshold {
            map.insert(*key, best)?;
        }
    }
    Ok(map)
}

/// Overwrites every point in a voted voxel with the voted class. The point
/// keeps its instance id; its distribution becomes one-hot at the vote with
/// value `max(S(p), T_s)`, which is also its new confidence.
pub fn apply_votes(
    points: &[Vector3<f64>],
    labels: &PointLabels,
    votes: &VoteMap,
    voxel_size: f64,
    score_threshold: f64,
) -> Result<PointLabels> {
    if points.len() != labels.len() {
        return Err(Error::SizeMismatch {
            what: "labels",
            expected: points.len(),
            got: labels.len(),
        });
    }
    if votes.num_classes != labels.num_classes && !votes.is_empty() {
        return Err(Error::SizeMismatch {
            what: "vote map classes",
            expected: labels.num_classes,
            got: votes.num_classes,
        });
    }
    let mut out = labels.clone();
    if votes.is_empty() {
        return Ok(out);
    }
    let floor = score_threshold as f32;
    for (i, p) in points.iter().enumerate() {
        let vote = votes.get(&VoxelKey::of(p, voxel_size));
        if vote < 0 {
            continue;
        }
        let conf = labels.confidence[i].max(floor);
        out.class_id[i] = vote;
        out.confidence[i] = conf;
        let row = out.row_mut(i);
        row.fill(0.0);
        row[vote as usize] = conf;
    }
    Ok(out)
}

/// Voting followed by label update on the current frame, with the ego voxel
/// at the vehicle origin.
pub fn vote_and_apply(
    current_points: &[Vector3<f64>],
    labels: &PointLabels,
    input: &VotingInput,
    voxel_size: f64,
    cfg: &VsvConfig,
) -> Result<PointLabels> {
    let ego = VoxelKey::of(&Vector3::zeros(), voxel_size);
    let votes = build_voting_space(input, voxel_size, ego, cfg)?;
    apply_votes(current_points, labels, &votes, voxel_size, cfg.score_threshold)
}

/// Indices of the `k` frames closest in time to `current` (excluding it);
/// ties go to the earlier frame.
pub fn nearest_frames(timestamps: &[f64], current: usize, k: usize) -> Vec<usize> {
    let t = timestamps[current];
    let mut others: Vec<usize> = (0..timestamps.len()).filter(|&i| i != current).collect();
    others.sort_by(|&a, &b| {
        (timestamps[a] - t)
            .abs()
            .total_cmp(&(timestamps[b] - t).abs())
            .then(a.cmp(&b))
    });
    others.truncate(k);
    others.sort_unstable();
    others
}

/// Refines current-frame labels with the labeled points of adjacent frames,
/// aligned by ego pose and voting with their prior distributions.
pub fn offline_refine(
    current: &Frame,
    labels: &PointLabels,
    adjacent: &[(&Frame, &PointLabels)],
    cfg: &PipelineConfig,
) -> Result<PointLabels> {
    let c = labels.num_classes;
    let mut points = Vec::new();
    let mut scores = Vec::new();
    for (frame, adj_labels) in adjacent {
        if frame.points.len() != adj_labels.len() {
            return Err(Error::SizeMismatch {
                what: "adjacent labels",
                expected: frame.points.len(),
                got: adj_labels.len(),
            });
        }
        if adj_labels.num_classes != c {
            return Err(Error::SizeMismatch {
                what: "adjacent label classes",
                expected: c,
                got: adj_labels.num_classes,
            });
        }
        let labeled: Vec<usize> = (0..adj_labels.len()).filter(|&i| adj_labels.is_labeled(i)).collect();
        let local: Vec<Vector3<f64>> = labeled.iter().map(|&i| frame.points[i].position()).collect();
        points.extend(transform_points(&local, &frame.ego_pose, &current.ego_pose)?);
        for &i in &labeled {
            scores.extend_from_slice(adj_labels.row(i));
        }
    }
    let input = VotingInput {
        points: &points,
        scores: &scores,
        num_classes: c,
    };
    vote_and_apply(&current.positions(), labels, &input, cfg.voxel_size, &cfg.vsv)
}

/// Refines current-frame labels with teacher scores on adjacent points that
/// the caller has already aligned to the current frame.
pub fn online_refine(
    current: &Frame,
    labels: &PointLabels,
    adjacent_points: &[Vector3<f64>],
    ema_scores: &ScoreMatrix,
    cfg: &PipelineConfig,
) -> Result<PointLabels> {
    if ema_scores.rows != adjacent_points.len() {
        return Err(Error::SizeMismatch {
            what: "ema score rows",
            expected: adjacent_points.len(),
            got: ema_scores.rows,
        });
    }
    if ema_scores.cols != labels.num_classes {
        return Err(Error::SizeMismatch {
            what: "ema score columns",
            expected: labels.num_classes,
            got: ema_scores.cols,
        });
    }
    for r in 0..ema_scores.rows {
        let row = ema_scores.row(r);
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if row.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidArgument {
                arg: "ema_scores",
                reason: format!("row {r} is not a probability vector"),
            });
        }
    }
    let input = VotingInput {
        points: adjacent_points,
        scores: &ema_scores.data,
        num_classes: ema_scores.cols,
    };
    vote_and_apply(&current.positions(), labels, &input, cfg.voxel_size, &cfg.vsv)
}
