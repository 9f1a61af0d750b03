//! Instance AP, semantic IoU and label-quality metrics.
//!
//! Instances are compared by point-set IoU. AP uses greedy score-ordered
//! matching and all-point interpolation, accumulated over every frame of a
//! sequence before the precision–recall curve is built.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::point_set_iou;
use crate::model::PointLabels;

/// A scored instance. `point_indices` is sorted and duplicate-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub point_indices: Vec<usize>,
    pub class_id: usize,
    pub score: f64,
}

impl InstancePrediction {
    pub fn new(mut point_indices: Vec<usize>, class_id: usize, score: f64) -> Result<Self> {
        point_indices.sort_unstable();
        point_indices.dedup();
        if point_indices.is_empty() {
            return Err(Error::EmptySet("instance points"));
        }
        if !score.is_finite() {
            return Err(Error::InvalidArgument {
                arg: "score",
                reason: "not finite".into(),
            });
        }
        Ok(Self {
            point_indices,
            class_id,
            score,
        })
    }
}

fn score_order(preds: &[InstancePrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching in descending score order. Each prediction takes the
/// unmatched ground-truth instance of its class with the highest IoU above
/// `iou_threshold`; ties go to the lower ground-truth index. Returns
/// `(pred, gt)` index pairs in matching order.
pub fn match_instances(
    preds: &[InstancePrediction],
    gts: &[InstancePrediction],
    iou_threshold: f64,
) -> Vec<(usize, usize)> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for p in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != preds[p].class_id {
                continue;
            }
            let iou = point_set_iou(&preds[p].point_indices, &gt.point_indices);
            if iou > iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out.push((p, g));
        }
    }
    out
}

/// All-point interpolated AP from detections sorted by descending score.
fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    // each true positive adds 1/num_gt of recall at its interpolated precision
    let area: f64 = hits.iter().zip(&precision).filter(|(h, _)| **h).map(|(_, p)| p).sum();
    area / num_gt as f64
}

/// AP tables for one class set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// `per_threshold[c][t]`; `None` when class `c` has no ground truth.
    pub per_threshold: Vec<Option<Vec<f64>>>,
    pub class_ap: Vec<Option<f64>>,
    pub map: f64,
}

/// AP over a sequence of `(predictions, ground truth)` frames.
pub fn average_precision(
    frames: &[(Vec<InstancePrediction>, Vec<InstancePrediction>)],
    num_classes: usize,
    thresholds: &[f64],
) -> ApSummary {
    let mut num_gt = vec![0usize; num_classes];
    for (_, gts) in frames {
        for g in gts.iter().filter(|g| g.class_id < num_classes) {
            num_gt[g.class_id] += 1;
        }
    }
    let mut per_threshold: Vec<Option<Vec<f64>>> =
        num_gt.iter().map(|&n| (n > 0).then(|| Vec::with_capacity(thresholds.len()))).collect();
    for &thr in thresholds {
        // (score, frame, pred, hit) per class
        let mut dets: Vec<Vec<(f64, usize, usize, bool)>> = vec![Vec::new(); num_classes];
        for (f, (preds, gts)) in frames.iter().enumerate() {
            let mut hit = vec![false; preds.len()];
            for (p, _) in match_instances(preds, gts, thr) {
                hit[p] = true;
            }
            for (p, pred) in preds.iter().enumerate().filter(|(_, p)| p.class_id < num_classes) {
                dets[pred.class_id].push((pred.score, f, p, hit[p]));
            }
        }
        for (c, d) in dets.iter_mut().enumerate() {
            let Some(row) = per_threshold[c].as_mut() else { continue };
            d.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            let hits: Vec<bool> = d.iter().map(|x| x.3).collect();
            row.push(interpolated_ap(&hits, num_gt[c]));
        }
    }
    let class_ap: Vec<Option<f64>> = per_threshold
        .iter()
        .map(|r| r.as_ref().map(|v| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }))
        .collect();
    let present: Vec<f64> = class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    ApSummary {
        per_threshold,
        class_ap,
        map,
    }
}

/// (C+1)×(C+1) point confusion counts; rows are ground truth, columns are
/// predictions, and the last index is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![vec![0; num_classes + 1]; num_classes + 1],
        }
    }

    fn slot(&self, class: i32) -> Result<usize> {
        match class {
            -1 => Ok(self.num_classes),
            c if c >= 0 && (c as usize) < self.num_classes => Ok(c as usize),
            c => Err(Error::InvalidArgument {
                arg: "class",
                reason: format!("{c} outside [-1, {})", self.num_classes),
            }),
        }
    }

    pub fn add(&mut self, pred: &[i32], gt: &[i32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::SizeMismatch {
                what: "predicted classes",
                expected: gt.len(),
                got: pred.len(),
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (self.slot(p)?, self.slot(g)?);
            self.counts[g][p] += 1;
        }
        Ok(())
    }

    /// Foreground IoU per class; `None` for a class absent from both sides.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.counts[c][c];
                let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
                let fp: u64 = self.counts.iter().map(|r| r[c]).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean foreground IoU over present classes, 0 when none is present.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Per-class foreground IoU and their mean. Classes are in `[0, C)`, −1 is
/// background.
pub fn semantic_iou(pred: &[i32], gt: &[i32], num_classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt)?;
    Ok((cm.class_iou(), cm.miou()))
}

/// Fraction of points whose class equals the ground truth, background
/// included. An empty frame scores 1.
pub fn label_accuracy(labels: &PointLabels, gt_classes: &[i32]) -> Result<f64> {
    if labels.len() != gt_classes.len() {
        return Err(Error::SizeMismatch {
            what: "ground-truth classes",
            expected: labels.len(),
            got: gt_classes.len(),
        });
    }
    if gt_classes.is_empty() {
        return Ok(1.0);
    }
    let correct = labels.class_id.iter().zip(gt_classes).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / gt_classes.len() as f64)
}

/// Group labeled points by instance id. Class is the majority class (ties
/// to the lower id) and score the mean confidence. Sorted by instance id.
pub fn instances_from_labels(labels: &PointLabels) -> Vec<InstancePrediction> {
    let mut groups: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for i in 0..labels.len() {
        if labels.instance_id[i] >= 0 && labels.class_id[i] >= 0 {
            groups.entry(labels.instance_id[i]).or_default().push(i);
        }
    }
    groups
        .into_values()
        .map(|idx| {
            let mut votes = vec![0usize; labels.num_classes];
            for &i in &idx {
                votes[labels.class_id[i] as usize] += 1;
            }
            let best = votes.iter().copied().max().unwrap_or(0);
            let class_id = votes.iter().position(|&v| v == best).unwrap_or(0);
            let score = idx.iter().map(|&i| labels.confidence[i] as f64).sum::<f64>() / idx.len() as f64;
            InstancePrediction {
                point_indices: idx,
                class_id,
                score,
            }
        })
        .collect()
}

/// Sequence-level evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub iou_thresholds: Vec<f64>,
    pub ap: ApSummary,
    pub class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
    pub label_accuracy: f64,
    pub num_frames: usize,
    pub num_points: usize,
}

/// Evaluate predicted labels against ground-truth labels frame by frame.
pub fn evaluate(frames: &[(&PointLabels, &PointLabels)], class_names: &[String], thresholds: &[f64]) -> Result<EvalReport> {
    let c = class_names.len();
    let mut confusion = ConfusionMatrix::new(c);
    let mut instance_frames = Vec::with_capacity(frames.len());
    let (mut correct, mut total) = (0usize, 0usize);
    for (pred, gt) in frames {
        if pred.num_classes != c || gt.num_classes != c {
            return Err(Error::SizeMismatch {
                what: "label classes",
                expected: c,
                got: if pred.num_classes != c { pred.num_classes } else { gt.num_classes },
            });
        }
        confusion.add(&pred.class_id, &gt.class_id)?;
        let acc = label_accuracy(pred, &gt.class_id)?;
        correct += (acc * gt.len() as f64).round() as usize;
        total += gt.len();
        instance_frames.push((instances_from_labels(pred), instances_from_labels(gt)));
    }
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        iou_thresholds: thresholds.to_vec(),
        ap: average_precision(&instance_frames, c, thresholds),
        class_iou: confusion.class_iou(),
        miou: confusion.miou(),
        confusion,
        label_accuracy: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
        num_frames: frames.len(),
        num_points: total,
    })
}

impl EvalReport {
    /// Aligned text table: AP ×100 and IoU ×100 per class plus the means.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>, digits: usize| match v {
            Some(v) => format!("{:.*}", digits, v * 100.0),
            None => "-".to_string(),
        };
        let width = self.class_names.iter().map(String::len).max().unwrap_or(0).max(8);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$} {:>8} {:>9}", "class", "AP", "IoU");
        let _ = writeln!(s, "{:<width$} {:>8} {:>9}", "mean", fmt(Some(self.ap.map), 2), fmt(Some(self.miou), 3));
        for (i, name) in self.class_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<width$} {:>8} {:>9}",
                name,
                fmt(self.ap.class_ap[i], 2),
                fmt(self.class_iou[i], 3)
            );
        }
        let _ = writeln!(s, "label accuracy {:.4} over {} points", self.label_accuracy, self.num_points);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_thresholds() -> Vec<f64> {
        crate::model::EvalConfig::default().iou_thresholds
    }

    fn inst(points: &[usize], class_id: usize, score: f64) -> InstancePrediction {
        InstancePrediction::new(points.to_vec(), class_id, score).unwrap()
    }

    #[test]
    fn matching_examples() {
        let gts = vec![inst(&[0, 1, 2], 0, 1.0), inst(&[3, 4], 1, 1.0)];
        assert_eq!(match_instances(&gts, &gts, 0.5), vec![(0, 0), (1, 1)]);

        // IoU 0.6 with the first, 0.9 with the second
        let a: Vec<usize> = (0..10).collect();
        let gts = vec![inst(&(4..14).collect::<Vec<_>>(), 0, 1.0), inst(&(0..9).collect::<Vec<_>>(), 0, 1.0)];
        assert!((point_set_iou(&a, &gts[0].point_indices) - 6.0 / 14.0).abs() < 1e-12);
        let gts = vec![inst(&(0..6).collect::<Vec<_>>(), 0, 1.0), gts[1].clone()];
        assert!((point_set_iou(&a, &gts[0].point_indices) - 0.6).abs() < 1e-12);
        assert!((point_set_iou(&a, &gts[1].point_indices) - 0.9).abs() < 1e-12);
        assert_eq!(match_instances(&[inst(&a, 0, 0.5)], &gts, 0.5), vec![(0, 1)]);

        let gt = vec![inst(&[0, 1, 2, 3], 0, 1.0)];
        let preds = vec![inst(&[0, 1, 2], 0, 0.3), inst(&[0, 1, 2, 3], 0, 0.8)];
        assert_eq!(match_instances(&preds, &gt, 0.5), vec![(1, 0)]);
        assert!(match_instances(&[inst(&[0, 1, 2, 3], 1, 0.9)], &gt, 0.5).is_empty());
    }

    #[test]
    fn matching_ties_go_to_lower_gt() {
        let gts = vec![inst(&[0, 1], 0, 1.0), inst(&[0, 1], 0, 1.0)];
        assert_eq!(match_instances(&[inst(&[0, 1], 0, 1.0)], &gts, 0.5), vec![(0, 0)]);
    }

    #[test]
    fn ap_examples() {
        let th = [0.5];
        let gt = vec![inst(&[0, 1, 2, 3], 0, 1.0)];
        let perfect = average_precision(&[(gt.clone(), gt.clone())], 1, &default_thresholds());
        assert_eq!(perfect.map, 1.0);
        assert_eq!(average_precision(&[(vec![], gt.clone())], 1, &th).map, 0.0);

        let tp = inst(&[0, 1, 2, 3], 0, 0.9);
        let fp = inst(&[10, 11], 0, 0.8);
        assert_eq!(average_precision(&[(vec![tp.clone(), fp.clone()], gt.clone())], 1, &th).map, 1.0);
        let tp = inst(&[0, 1, 2, 3], 0, 0.8);
        let fp = inst(&[10, 11], 0, 0.9);
        assert_eq!(average_precision(&[(vec![tp, fp], gt)], 1, &th).map, 0.5);
    }

    #[test]
    fn ap_hand_pr_curve() {
        // ranks: TP FP TP FP TP over 4 GT. Precisions 1, .5, 2/3, .5, .6;
        // interpolated at TPs: 1, 2/3, .6
        let hits = [true, false, true, false, true];
        let want = (1.0 + 2.0 / 3.0 + 0.6) / 4.0;
        assert!((interpolated_ap(&hits, 4) - want).abs() < 1e-15);
    }

    #[test]
    fn map_ignores_classes_without_gt() {
        let gt = vec![inst(&[0, 1], 0, 1.0)];
        let preds = vec![inst(&[0, 1], 0, 1.0), inst(&[5, 6], 2, 0.9)];
        let s = average_precision(&[(preds, gt)], 3, &[0.5, 0.75]);
        assert_eq!(s.class_ap, vec![Some(1.0), None, None]);
        assert_eq!(s.map, 1.0);
    }

    #[test]
    fn semantic_iou_examples() {
        let a = [0, 1, -1, 2, 0];
        let (iou, m) = semantic_iou(&a, &a, 3).unwrap();
        assert_eq!(iou, vec![Some(1.0); 3]);
        assert_eq!(m, 1.0);

        let (iou, m) = semantic_iou(&[-1, -1, -1], &[0, 0, -1], 2).unwrap();
        assert_eq!(iou, vec![Some(0.0), None]);
        assert_eq!(m, 0.0);
        assert!(semantic_iou(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn semantic_iou_hand_confusion() {
        let gt = [0, 0, 0, 0, 1, 1, 1, -1, -1, -1];
        let pred = [0, 0, 1, -1, 1, 1, 0, -1, 1, -1];
        // class 0: TP 2, FP 1, FN 2; class 1: TP 2, FP 2, FN 1
        let (iou, m) = semantic_iou(&pred, &gt, 2).unwrap();
        assert_eq!(iou, vec![Some(2.0 / 5.0), Some(2.0 / 5.0)]);
        assert_eq!(m, 0.4);
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&pred, &gt).unwrap();
        assert_eq!(cm.counts, vec![vec![2, 1, 1], vec![1, 2, 0], vec![0, 1, 2]]);
    }

    fn with_classes(classes: &[i32]) -> PointLabels {
        let mut l = PointLabels::background(classes.len(), 2);
        for (i, &c) in classes.iter().enumerate() {
            if c >= 0 {
                let mut row = [0.0f32; 2];
                row[c as usize] = 1.0;
                l.set_point(i, 0, 1.0, &row);
            }
        }
        l
    }

    #[test]
    fn label_accuracy_examples() {
        let gt: Vec<i32> = (0..100).map(|i| i % 2).collect();
        assert_eq!(label_accuracy(&with_classes(&gt), &gt).unwrap(), 1.0);
        let comp: Vec<i32> = gt.iter().map(|c| 1 - c).collect();
        assert_eq!(label_accuracy(&with_classes(&comp), &gt).unwrap(), 0.0);
        let half: Vec<i32> = gt.iter().enumerate().map(|(i, &c)| if i < 50 { 1 - c } else { c }).collect();
        assert_eq!(label_accuracy(&with_classes(&half), &gt).unwrap(), 0.5);
        assert!(label_accuracy(&with_classes(&[0]), &[0, 1]).is_err());
    }

    #[test]
    fn instances_group_by_id() {
        let mut l = PointLabels::background(5, 2);
        l.set_point(0, 3, 0.5, &[0.5, 0.0]);
        l.set_point(1, 3, 1.0, &[1.0, 0.0]);
        l.set_point(2, 3, 0.75, &[0.0, 0.75]);
        l.set_point(4, 1, 0.25, &[0.0, 0.25]);
        let inst = instances_from_labels(&l);
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[0].point_indices, vec![4]);
        assert_eq!(inst[1].point_indices, vec![0, 1, 2]);
        assert_eq!(inst[1].class_id, 0);
        assert_eq!(inst[1].score, 0.75);
    }

    #[test]
    fn evaluate_identity_and_background() {
        let mut gt = PointLabels::background(6, 2);
        gt.set_point(0, 0, 1.0, &[1.0, 0.0]);
        gt.set_point(1, 0, 1.0, &[1.0, 0.0]);
        gt.set_point(3, 1, 1.0, &[0.0, 1.0]);
        let names = vec!["a".to_string(), "b".to_string()];
        let th = default_thresholds();
        let r = evaluate(&[(&gt, &gt)], &names, &th).unwrap();
        assert_eq!((r.ap.map, r.miou, r.label_accuracy), (1.0, 1.0, 1.0));
        assert!(r.to_table().contains("100.000"));

        let bg = PointLabels::background(6, 2);
        let r = evaluate(&[(&bg, &gt)], &names, &th).unwrap();
        assert_eq!(r.ap.map, 0.0);
        assert_eq!(r.miou, 0.0);
    }

    fn random_fixture(rng: &mut ChaCha8Rng) -> Vec<(Vec<InstancePrediction>, Vec<InstancePrediction>)> {
        (0..3)
            .map(|_| {
                let n_gt = rng.random_range(1..6);
                let gts: Vec<InstancePrediction> = (0..n_gt)
                    .map(|g| {
                        let start = g * 40;
                        inst(&(start..start + rng.random_range(10..40)).collect::<Vec<_>>(), rng.random_range(0..2), 1.0)
                    })
                    .collect();
                let preds = (0..rng.random_range(0..8))
                    .map(|_| {
                        let start = rng.random_range(0..200);
                        let len = rng.random_range(5..45);
                        inst(&(start..start + len).collect::<Vec<_>>(), rng.random_range(0..2), rng.random_range(0.0..1.0))
                    })
                    .collect();
                (preds, gts)
            })
            .collect()
    }

    #[test]
    fn ap_non_increasing_in_threshold() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = random_fixture(&mut rng);
            let mut last = f64::INFINITY;
            for k in 0..19 {
                let m = average_precision(&frames, 2, &[0.05 * k as f64]).map;
                assert!(m <= last + 1e-15, "seed {seed}");
                last = m;
            }
        }
    }

    proptest! {
        #[test]
        fn semantic_iou_permutation_invariant(pairs in proptest::collection::vec((-1i32..3, -1i32..3), 1..60), seed in any::<u64>()) {
            let (p, g): (Vec<i32>, Vec<i32>) = pairs.iter().copied().unzip();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let pp: Vec<i32> = idx.iter().map(|&i| p[i]).collect();
            let gg: Vec<i32> = idx.iter().map(|&i| g[i]).collect();
            prop_assert_eq!(semantic_iou(&p, &g, 3).unwrap(), semantic_iou(&pp, &gg, 3).unwrap());
        }

        #[test]
        fn removing_false_positive_never_lowers_ap(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = random_fixture(&mut rng);
            let th = [0.5];
            let base = average_precision(&frames, 2, &th);
            for (f, (preds, gts)) in frames.iter().enumerate() {
                let matched: Vec<usize> = match_instances(preds, gts, 0.5).into_iter().map(|m| m.0).collect();
                if let Some(fp) = (0..preds.len()).find(|p| !matched.contains(p)) {
                    let mut fewer = frames.clone();
                    fewer[f].0.remove(fp);
                    prop_assert!(average_precision(&fewer, 2, &th).map >= base.map - 1e-15);
                }
            }
        }

        #[test]
        fn self_evaluation_is_perfect(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<_> = random_fixture(&mut rng).into_iter().map(|(_, g)| (g.clone(), g)).collect();
            prop_assert_eq!(average_precision(&frames, 2, &default_thresholds()).map, 1.0);
        }
    }

}
