//! Unsupervised pseudo-label generation: lifting 2D detections onto the
//! LiDAR sweep, cleaning them by connectivity, merging rider parts and
//! cross-view duplicates, and painting the result onto points.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{connected_components, point_set_iou, project_point};
use crate::model::{
    argmax, rle_decode, rle_encode, CameraCalibration, DetectionRecord, Frame, PipelineConfig,
    PointLabels, RiderMergeConfig, VerticalRule,
};

/// A detection lifted to a set of LiDAR points.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance3D {
    pub instance_id: i32,
    /// Sorted, deduplicated point indices.
    pub point_indices: Vec<usize>,
    pub class_distribution: Vec<f64>,
    pub confidence: f64,
    pub source_views: BTreeSet<String>,
    pub embedding: Option<Vec<f64>>,
}

impl Instance3D {
    pub fn top_class(&self) -> usize {
        argmax(&self.class_distribution)
    }
}

/// Per-class distribution as the best score among that class's prompts, and
/// the detection confidence as the best class score.
pub fn extract_distribution(
    prompt_scores: &BTreeMap<String, f64>,
    prompt_to_class: &BTreeMap<String, usize>,
    num_classes: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut dist = vec![0.0f64; num_classes];
    for (prompt, &score) in prompt_scores {
        let &class = prompt_to_class
            .get(prompt)
            .ok_or_else(|| Error::UnknownPrompt(prompt.clone()))?;
        if class >= num_classes {
            return Err(Error::InvalidArgument {
                arg: "prompt_to_class",
                reason: format!("`{prompt}` maps to class {class} >= {num_classes}"),
            });
        }
        dist[class] = dist[class].max(score);
    }
    let confidence = dist.iter().copied().fold(0.0, f64::max);
    Ok((dist, confidence))
}

/// Confidence-weighted mean of distributions, rescaled so its peak equals
/// the largest input confidence.
fn blend_distributions<'a>(parts: impl IntoIterator<Item = (&'a [f64], f64)> + Clone) -> (Vec<f64>, f64) {
    let mut weight_total = 0.0;
    let mut max_conf = 0.0f64;
    let mut count = 0usize;
    let mut len = 0;
    for (d, w) in parts.clone() {
        weight_total += w;
        max_conf = max_conf.max(w);
        count += 1;
        len = d.len();
    }
    let mut mean = vec![0.0; len];
    for (d, w) in parts {
        // all-zero weights fall back to a plain mean
        let w = if weight_total > 0.0 { w / weight_total } else { 1.0 / count as f64 };
        for (m, v) in mean.iter_mut().zip(d) {
            *m += w * v;
        }
    }
    let peak = mean.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        let scale = max_conf / peak;
        for m in &mut mean {
            *m = (*m * scale).min(1.0);
        }
        let i = argmax(&mean);
        mean[i] = max_conf;
    }
    let conf = mean.iter().copied().fold(0.0, f64::max);
    (mean, conf)
}

fn blend_embeddings<'a>(parts: impl IntoIterator<Item = (Option<&'a Vec<f64>>, f64)>) -> Option<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for (e, w) in parts {
        let Some(e) = e else { continue };
        let a = acc.get_or_insert_with(|| vec![0.0; e.len()]);
        if a.len() != e.len() {
            continue;
        }
        for (x, v) in a.iter_mut().zip(e) {
            *x += w * v;
        }
    }
    let mut a = acc?;
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        a.iter_mut().for_each(|v| *v /= norm);
        Some(a)
    } else {
        None
    }
}

fn union_masks(a: &DetectionRecord, b: &DetectionRecord) -> Result<crate::model::RleMask> {
    let (ma, mb) = (rle_decode(&a.mask)?, rle_decode(&b.mask)?);
    if ma.len() != mb.len() || a.mask.width != b.mask.width {
        return Err(Error::SizeMismatch {
            what: "rider masks",
            expected: ma.len(),
            got: mb.len(),
        });
    }
    let merged: Vec<bool> = ma.iter().zip(&mb).map(|(x, y)| *x || *y).collect();
    rle_encode(&merged, a.mask.width, a.mask.height)
}

fn is_rider_candidate(person: &DetectionRecord, bike: &DetectionRecord, cfg: &RiderMergeConfig) -> bool {
    let (pcx, _) = person.bbox.center();
    let (bcx, bcy) = bike.bbox.center();
    let vertical_ok = match cfg.vert_rule {
        VerticalRule::BottomAboveCenter => person.bbox.v_max <= bcy,
        VerticalRule::BottomAboveBottom => person.bbox.v_max <= bike.bbox.v_max,
    };
    vertical_ok && (pcx - bcx).abs() <= cfg.horiz_tol * bike.bbox.width()
}

fn center_distance(a: &DetectionRecord, b: &DetectionRecord) -> f64 {
    let (ax, ay) = a.bbox.center();
    let (bx, by) = b.bbox.center();
    (ax - bx).hypot(ay - by)
}

fn merge_pair(person: &DetectionRecord, bike: &DetectionRecord, cfg: &RiderMergeConfig) -> Result<DetectionRecord> {
    let parts = [
        (person.class_distribution.as_slice(), person.confidence),
        (bike.class_distribution.as_slice(), bike.confidence),
    ];
    let (mut dist, confidence) = blend_distributions(parts);
    if cfg.cyclist_class < dist.len() {
        let top = argmax(&dist);
        dist.swap(top, cfg.cyclist_class);
    }
    let mut prompt_scores = person.prompt_scores.clone();
    for (k, &v) in &bike.prompt_scores {
        let e = prompt_scores.entry(k.clone()).or_insert(v);
        *e = e.max(v);
    }
    Ok(DetectionRecord {
        view_id: bike.view_id.clone(),
        bbox: person.bbox.union(&bike.bbox),
        prompt_scores,
        class_distribution: dist,
        confidence,
        mask: union_masks(person, bike)?,
        embedding: blend_embeddings([
            (person.embedding.as_ref(), person.confidence),
            (bike.embedding.as_ref(), bike.confidence),
        ]),
    })
}

/// Fuses each bicycle detection with the nearest person riding it into a
/// single cyclist detection.
///
/// Bicycles are visited in input order and each takes the closest
/// unclaimed candidate person (lower index on ties). Merged detections
/// replace their bicycle in the output; consumed persons are dropped.
pub fn merge_rider(detections: &[DetectionRecord], cfg: &RiderMergeConfig) -> Result<Vec<DetectionRecord>> {
    if !cfg.enabled {
        return Ok(detections.to_vec());
    }
    let class_of = |d: &DetectionRecord| d.top_class();
    let mut consumed = vec![false; detections.len()];
    let mut merged: HashMap<usize, DetectionRecord> = HashMap::new();
    for (b, bike) in detections.iter().enumerate() {
        if class_of(bike) != Some(cfg.bicycle_class) || consumed[b] {
            continue;
        }
        let best = detections
            .iter()
            .enumerate()
            .filter(|&(p, person)| {
                p != b
                    && !consumed[p]
                    && !merged.contains_key(&p)
                    && class_of(person) == Some(cfg.person_class)
                    && is_rider_candidate(person, bike, cfg)
            })
            .min_by(|(pa, a), (pb, bb)| {
                center_distance(a, bike)
                    .total_cmp(&center_distance(bb, bike))
                    .then(pa.cmp(pb))
            })
            .map(|(p, _)| p);
        if let Some(p) = best {
            consumed[p] = true;
            consumed[b] = true;
            merged.insert(b, merge_pair(&detections[p], bike, cfg)?);
        }
    }
    Ok(detections
        .iter()
        .enumerate()
        .filter_map(|(i, d)| match merged.remove(&i) {
            Some(m) => Some(m),
            None if consumed[i] => None,
            None => Some(d.clone()),
        })
        .collect())
}

/// Pixel hit by every point in one view, or `None` when outside the image.
pub fn project_view(points: &[Vector3<f64>], calib: &CameraCalibration) -> Vec<Option<(u32, u32)>> {
    points.iter().map(|p| project_point(p, calib).pixel()).collect()
}

/// Lifts one detection using precomputed per-point pixels for its view.
pub fn build_instance_projected(
    points: &[Vector3<f64>],
    pixels: &[Option<(u32, u32)>],
    det: &DetectionRecord,
    cluster_voxel_size: f64,
) -> Result<Option<Instance3D>> {
    let lookup = det.mask.lookup()?;
    let lifted: Vec<usize> = pixels
        .iter()
        .enumerate()
        .filter_map(|(i, px)| px.filter(|&(u, v)| lookup.contains(u, v)).map(|_| i))
        .collect();
    if lifted.is_empty() {
        return Ok(None);
    }
    let mut clusters = connected_components(&lifted, points, cluster_voxel_size)?;
    let largest = clusters.swap_remove(0);
    Ok(Some(Instance3D {
        instance_id: 0,
        point_indices: largest,
        class_distribution: det.class_distribution.clone(),
        confidence: det.confidence,
        source_views: BTreeSet::from([det.view_id.clone()]),
        embedding: det.embedding.clone(),
    }))
}

/// Points whose projection falls in the detection mask, reduced to their
/// largest connected cluster. `None` when no point lands in the mask.
pub fn build_instance(frame: &Frame, det: &DetectionRecord, cfg: &PipelineConfig) -> Result<Option<Instance3D>> {
    let calib = frame
        .camera(&det.view_id)
        .ok_or_else(|| Error::ViewMismatch(det.view_id.clone()))?;
    let points = frame.positions();
    let pixels = project_view(&points, calib);
    build_instance_projected(&points, &pixels, det, cfg.cluster_voxel_size)
}

fn canonical_order(a: &Instance3D, b: &Instance3D) -> std::cmp::Ordering {
    a.point_indices
        .cmp(&b.point_indices)
        .then_with(|| a.source_views.cmp(&b.source_views))
        .then_with(|| a.confidence.total_cmp(&b.confidence))
        .then_with(|| {
            a.class_distribution
                .iter()
                .map(|v| v.to_bits())
                .cmp(b.class_distribution.iter().map(|v| v.to_bits()))
        })
}

fn merge_group(members: &mut [Instance3D]) -> Instance3D {
    members.sort_by(canonical_order);
    if members.len() == 1 {
        return members[0].clone();
    }
    let mut points: Vec<usize> = members.iter().flat_map(|m| m.point_indices.iter().copied()).collect();
    points.sort_unstable();
    points.dedup();
    let (class_distribution, confidence) =
        blend_distributions(members.iter().map(|m| (m.class_distribution.as_slice(), m.confidence)));
    Instance3D {
        instance_id: 0,
        point_indices: points,
        class_distribution,
        confidence,
        source_views: members.iter().flat_map(|m| m.source_views.iter().cloned()).collect(),
        embedding: blend_embeddings(members.iter().map(|m| (m.embedding.as_ref(), m.confidence))),
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// One round of merging: transitive closure over pairs with disjoint views
/// and IoU above the threshold. Returns whether anything merged.
fn merge_round(instances: Vec<Instance3D>, iou_threshold: f64) -> (Vec<Instance3D>, bool) {
    let n = instances.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut any = false;
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&instances[i], &instances[j]);
            if !a.source_views.is_disjoint(&b.source_views) {
                continue;
            }
            if point_set_iou(&a.point_indices, &b.point_indices) > iou_threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                    any = true;
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<Instance3D>> = BTreeMap::new();
    for (i, inst) in instances.into_iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(inst);
    }
    (groups.into_values().map(|mut g| merge_group(&mut g)).collect(), any)
}

/// Merges instances of the same object seen from different cameras.
///
/// Rounds repeat until no pair qualifies, so the output is a fixpoint and
/// merging it again is a no-op. Output is in canonical order with ids
/// renumbered from zero, independent of input order.
pub fn cross_view_merge(instances: &[Instance3D], iou_threshold: f64) -> Vec<Instance3D> {
    let mut current: Vec<Instance3D> = instances.to_vec();
    current.sort_by(canonical_order);
    loop {
        let (next, merged) = merge_round(current, iou_threshold);
        current = next;
        current.sort_by(canonical_order);
        if !merged {
            break;
        }
    }
    for (id, inst) in current.iter_mut().enumerate() {
        inst.instance_id = id as i32;
    }
    current
}

/// Paints instances onto `n` points. A point claimed twice keeps the more
/// confident instance (lower id on ties). Instances with an all-zero
/// distribution carry no class and are skipped.
pub fn assign_point_labels(instances: &[Instance3D], n: usize, num_classes: usize) -> Result<PointLabels> {
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (k, inst) in instances.iter().enumerate() {
        if inst.class_distribution.len() != num_classes {
            return Err(Error::SizeMismatch {
                what: "instance class_distribution",
                expected: num_classes,
                got: inst.class_distribution.len(),
            });
        }
        if inst.class_distribution.iter().all(|&p| p == 0.0) {
            continue;
        }
        for &p in &inst.point_indices {
            let slot = owner.get_mut(p).ok_or_else(|| Error::InvalidArgument {
                arg: "point_indices",
                reason: format!("index {p} out of range for {n} points"),
            })?;
            let better = match *slot {
                None => true,
                Some(o) => {
                    let cur = &instances[o];
                    inst.confidence > cur.confidence
                        || (inst.confidence == cur.confidence && inst.instance_id < cur.instance_id)
                }
            };
            if better {
                *slot = Some(k);
            }
        }
    }
    let mut labels = PointLabels::background(n, num_classes);
    let rows: Vec<Vec<f32>> = instances
        .iter()
        .map(|i| i.class_distribution.iter().map(|&v| v as f32).collect())
        .collect();
    for (p, o) in owner.iter().enumerate() {
        if let Some(k) = *o {
            let row = &rows[k];
            let conf = row.iter().copied().fold(0.0f32, f32::max);
            labels.set_point(p, instances[k].instance_id, conf, row);
        }
    }
    Ok(labels)
}

/// Full per-frame generation: rider merge per view, lifting, cross-view
/// merging and point labelling.
pub fn generate_frame_labels(
    frame: &Frame,
    detections: &[DetectionRecord],
    cfg: &PipelineConfig,
) -> Result<(PointLabels, Vec<Instance3D>)> {
    for det in detections {
        if frame.camera(&det.view_id).is_none() {
            return Err(Error::ViewMismatch(det.view_id.clone()));
        }
    }
    let points = frame.positions();
    let mut instances = Vec::new();
    for calib in &frame.cameras {
        let view: Vec<DetectionRecord> = detections
            .iter()
            .filter(|d| d.view_id == calib.view_id)
            .cloned()
            .collect();
        if view.is_empty() {
            continue;
        }
        let view = merge_rider(&view, &cfg.rider_merge)?;
        let pixels = project_view(&points, calib);
        for det in &view {
            if let Some(inst) = build_instance_projected(&points, &pixels, det, cfg.cluster_voxel_size)? {
                instances.push(inst);
            }
        }
    }
    let merged = cross_view_merge(&instances, cfg.cvim_iou_threshold);
    let labels = assign_point_labels(&merged, points.len(), cfg.num_classes())?;
    Ok((labels, merged))
}
