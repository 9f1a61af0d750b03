use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::VoxelKey;
use crate::model::PointLabels;
use crate::vsv::VoteMap;

use super::classification::log_softmax;
use super::contrastive::{add_cosine_grad, cosine};
use super::FeatureMatrix;

/// Per-class reliable current-frame points: pseudo-label class `c`,
/// confidence strictly above `t_conf` and predicted probability for `c`
/// strictly above `phi`.
pub fn select_reliable_current(
    labels: &PointLabels,
    predictions: &FeatureMatrix,
    t_conf: f64,
    phi: f64,
) -> Result<Vec<Vec<usize>>> {
    if predictions.rows != labels.len() || predictions.dim != labels.num_classes {
        return Err(Error::SizeMismatch {
            what: "predictions",
            expected: labels.len() * labels.num_classes,
            got: predictions.rows * predictions.dim,
        });
    }
    let threshold = t_conf as f32;
    let mut sets = vec![Vec::new(); labels.num_classes];
    for i in 0..labels.len() {
        let c = labels.class_id[i];
        if c < 0 {
            continue;
        }
        let c = c as usize;
        if labels.confidence[i] > threshold && predictions.row(i)[c] > phi {
            sets[c].push(i);
        }
    }
    Ok(sets)
}

/// Per-class adjacent points whose voxel voted for that class.
pub fn select_reliable_adjacent(votes: &VoteMap, adjacent_points: &[Vector3<f64>], voxel_size: f64) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); votes.num_classes];
    for (i, p) in adjacent_points.iter().enumerate() {
        let v = votes.get(&VoxelKey::of(p, voxel_size));
        if v >= 0 {
            sets[v as usize].push(i);
        }
    }
    sets
}

/// Mean feature of each non-empty set; empty sets give `None`.
pub fn estimate_prototypes(features: &FeatureMatrix, sets: &[Vec<usize>]) -> Result<Vec<Option<Vec<f64>>>> {
    sets.iter()
        .map(|set| {
            if set.is_empty() {
                Ok(None)
            } else {
                super::aggregate_instance_feature(features, set).map(Some)
            }
        })
        .collect()
}

/// One set of class prototypes; rows of uninitialized classes are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: FeatureMatrix,
    pub initialized: Vec<bool>,
}

impl PrototypeSet {
    pub fn empty(num_classes: usize, dim: usize) -> Self {
        Self {
            prototypes: FeatureMatrix::zeros(num_classes, dim),
            initialized: vec![false; num_classes],
        }
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.initialized
            .get(class)
            .copied()
            .unwrap_or(false)
            .then(|| self.prototypes.row(class))
    }

    fn updated(&self, estimates: &[Option<Vec<f64>>], theta: f64) -> Result<Self> {
        if estimates.len() != self.initialized.len() {
            return Err(Error::SizeMismatch {
                what: "prototype estimates",
                expected: self.initialized.len(),
                got: estimates.len(),
            });
        }
        let mut next = self.clone();
        for (c, est) in estimates.iter().enumerate() {
            let Some(est) = est else { continue };
            if est.len() != self.prototypes.dim {
                return Err(Error::SizeMismatch {
                    what: "prototype dim",
                    expected: self.prototypes.dim,
                    got: est.len(),
                });
            }
            let row = next.prototypes.row_mut(c);
            if self.initialized[c] {
                for (f, e) in row.iter_mut().zip(est) {
                    *f = theta * *f + (1.0 - theta) * e;
                }
            } else {
                row.copy_from_slice(est);
                next.initialized[c] = true;
            }
        }
        Ok(next)
    }
}

/// Class prototypes from current-frame and adjacent-frame reliable points,
/// updated with momentum `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub current: PrototypeSet,
    pub adjacent: PrototypeSet,
    pub theta: f64,
}

impl PrototypeBank {
    pub fn new(num_classes: usize, dim: usize, theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::InvalidArgument {
                arg: "theta",
                reason: format!("{theta} outside [0, 1]"),
            });
        }
        Ok(Self {
            current: PrototypeSet::empty(num_classes, dim),
            adjacent: PrototypeSet::empty(num_classes, dim),
            theta,
        })
    }
}

/// EMA step `F ← θ·F + (1−θ)·F̂` on both prototype sets. A class seen for
/// the first time takes its estimate directly; a class without an estimate
/// keeps its prototype.
pub fn update_prototypes(
    bank: &PrototypeBank,
    current_estimates: &[Option<Vec<f64>>],
    adjacent_estimates: &[Option<Vec<f64>>],
) -> Result<PrototypeBank> {
    Ok(PrototypeBank {
        current: bank.current.updated(current_estimates, bank.theta)?,
        adjacent: bank.adjacent.updated(adjacent_estimates, bank.theta)?,
        theta: bank.theta,
    })
}

/// InfoNCE of foreground features against one prototype set. Adds the
/// gradient into `grad`; returns the term value and how many points used it.
fn prototype_term(
    features: &FeatureMatrix,
    labels: &PointLabels,
    set: &PrototypeSet,
    tau: f64,
    grad: &mut FeatureMatrix,
) -> (f64, usize) {
    let classes: Vec<usize> = (0..set.initialized.len()).filter(|&c| set.initialized[c]).collect();
    let anchors: Vec<usize> = (0..labels.len())
        .filter(|&i| labels.class_id[i] >= 0 && set.get(labels.class_id[i] as usize).is_some())
        .collect();
    if anchors.is_empty() {
        return (0.0, 0);
    }
    let scale = 1.0 / anchors.len() as f64;
    let mut total = 0.0;
    for &i in &anchors {
        let f = features.row(i);
        let target = labels.class_id[i] as usize;
        let logits: Vec<f64> = classes
            .iter()
            .map(|&c| cosine(f, set.prototypes.row(c)) / tau)
            .collect();
        let logp = log_softmax(&logits);
        let pos = classes.iter().position(|&c| c == target).expect("anchor class initialized");
        total -= logp[pos];
        let g = grad.row_mut(i);
        for (k, &c) in classes.iter().enumerate() {
            let dl = logp[k].exp() - if k == pos { 1.0 } else { 0.0 };
            add_cosine_grad(set.prototypes.row(c), f, scale * dl / tau, g);
        }
    }
    (total * scale, anchors.len())
}

/// Pulls each foreground feature toward its class prototype in both sets.
/// Only initialized prototypes take part; a point whose class has no
/// prototype in a set is left out of that set's term.
pub fn pcl_loss(
    features: &FeatureMatrix,
    labels: &PointLabels,
    bank: &PrototypeBank,
    tau: f64,
) -> Result<(f64, FeatureMatrix)> {
    if features.rows != labels.len() {
        return Err(Error::SizeMismatch {
            what: "features",
            expected: labels.len(),
            got: features.rows,
        });
    }
    for set in [&bank.current, &bank.adjacent] {
        if set.prototypes.dim != features.dim || set.initialized.len() != labels.num_classes {
            return Err(Error::SizeMismatch {
                what: "prototype set",
                expected: features.dim,
                got: set.prototypes.dim,
            });
        }
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument {
            arg: "tau",
            reason: "must be positive".into(),
        });
    }
    let mut grad = FeatureMatrix::zeros(features.rows, features.dim);
    let (cur, n_cur) = prototype_term(features, labels, &bank.current, tau, &mut grad);
    let (adj, n_adj) = prototype_term(features, labels, &bank.adjacent, tau, &mut grad);
    if n_cur + n_adj == 0 {
        return Err(Error::NoUsablePrototypes);
    }
    Ok((cur + adj, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(classes: &[i32], conf: &[f32], c: usize) -> PointLabels {
        let mut l = PointLabels::background(classes.len(), c);
        for (i, (&k, &s)) in classes.iter().zip(conf).enumerate() {
            if k >= 0 {
                let mut row = vec![0.0f32; c];
                row[k as usize] = s;
                l.set_point(i, 0, s, &row);
            }
        }
        l
    }

    #[test]
    fn reliable_current_examples() {
        let preds = FeatureMatrix::from_rows(&[vec![0.7, 0.3], vec![0.7, 0.3], vec![0.6, 0.4]]).unwrap();
        let l = labels(&[0, 0, 0], &[0.5, 0.4, 0.9], 2);
        let sets = select_reliable_current(&l, &preds, 0.4, 0.65).unwrap();
        assert_eq!(sets, vec![vec![0], vec![]]);
        let empty = select_reliable_current(&PointLabels::background(0, 2), &FeatureMatrix::zeros(0, 2), 0.4, 0.65).unwrap();
        assert_eq!(empty, vec![Vec::<usize>::new(); 2]);
    }

    #[test]
    fn reliable_adjacent_examples() {
        let pts = vec![
            Vector3::new(0.1, 0.1, 0.1),
            Vector3::new(0.2, 0.3, 0.1),
            Vector3::new(0.4, 0.4, 0.4),
            Vector3::new(1.5, 0.0, 0.0),
        ];
        assert_eq!(select_reliable_adjacent(&VoteMap::new(2), &pts, 0.5), vec![Vec::<usize>::new(); 2]);
        let mut votes = VoteMap::new(2);
        votes.insert(VoxelKey::new(0, 0, 0), 1).unwrap();
        assert_eq!(select_reliable_adjacent(&votes, &pts, 0.5), vec![vec![], vec![0, 1, 2]]);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<_> = (0..300)
            .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0))
            .collect();
        let mut votes = VoteMap::new(3);
        for p in pts.iter().step_by(3) {
            votes.insert(VoxelKey::of(p, 0.4), rng.random_range(0..3)).unwrap();
        }
        let sets = select_reliable_adjacent(&votes, &pts, 0.4);
        for (i, p) in pts.iter().enumerate() {
            let v = votes.get(&VoxelKey::of(p, 0.4));
            for (c, set) in sets.iter().enumerate() {
                assert_eq!(set.contains(&i), v == c as i32);
            }
        }
    }

    #[test]
    fn estimate_examples() {
        let f = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![5.0, 4.0]]).unwrap();
        let est = estimate_prototypes(&f, &[vec![0], vec![], vec![1, 2]]).unwrap();
        assert_eq!(est, vec![Some(vec![1.0, 0.0]), None, Some(vec![4.0, 3.0])]);
    }

    #[test]
    fn update_examples() {
        let bank = PrototypeBank {
            current: PrototypeSet {
                prototypes: FeatureMatrix::zeros(1, 2),
                initialized: vec![true],
            },
            adjacent: PrototypeSet::empty(1, 2),
            theta: 0.9,
        };
        let est = vec![Some(vec![1.0, 1.0])];
        let next = update_prototypes(&bank, &est, &est).unwrap();
        for v in next.current.prototypes.row(0) {
            assert!((v - 0.1).abs() < 1e-15);
        }
        // cold start takes the estimate
        assert_eq!(next.adjacent.get(0), Some(&[1.0, 1.0][..]));

        let frozen = PrototypeBank { theta: 1.0, ..bank.clone() };
        let next = update_prototypes(&frozen, &est, &[None]).unwrap();
        assert_eq!(next.current, frozen.current);
        assert_eq!(next.adjacent, frozen.adjacent);

        assert!(update_prototypes(&bank, &[Some(vec![1.0])], &[None]).is_err());
        assert!(PrototypeBank::new(2, 2, 1.5).is_err());
    }

    #[test]
    fn ema_decays_geometrically() {
        let theta = 0.9;
        let start = PrototypeSet {
            prototypes: FeatureMatrix::from_rows(&[vec![2.0, -1.0, 0.5]]).unwrap(),
            initialized: vec![true],
        };
        let mut bank = PrototypeBank {
            current: start.clone(),
            adjacent: start,
            theta,
        };
        let target = vec![0.3, 0.7, -0.2];
        let dist = |b: &PrototypeBank| {
            b.current.prototypes.row(0).iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let d0 = dist(&bank);
        for t in 1..=50 {
            bank = update_prototypes(&bank, &[Some(target.clone())], &[Some(target.clone())]).unwrap();
            assert!((dist(&bank) - theta.powi(t) * d0).abs() < 1e-12);
        }
    }

    fn bank_with(protos: &[Vec<f64>]) -> PrototypeBank {
        let set = PrototypeSet {
            prototypes: FeatureMatrix::from_rows(protos).unwrap(),
            initialized: vec![true; protos.len()],
        };
        PrototypeBank {
            current: set.clone(),
            adjacent: set,
            theta: 0.9,
        }
    }

    #[test]
    fn pcl_single_prototype_is_zero() {
        let f = FeatureMatrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let (v, _) = pcl_loss(&f, &labels(&[0], &[0.9], 1), &bank_with(&[vec![1.0, 1.0]]), 0.5).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn pcl_closed_form() {
        let protos = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let f = FeatureMatrix::from_rows(&protos).unwrap();
        let l = labels(&[0, 1, 2], &[0.9; 3], 3);
        let (v, _) = pcl_loss(&f, &l, &bank_with(&protos), 0.5).unwrap();
        let e2 = 2f64.exp();
        let per_term = -(e2 / (e2 + 2.0)).ln();
        assert!((v - 2.0 * per_term).abs() < 1e-14);
    }

    #[test]
    fn pcl_needs_some_prototype() {
        let f = FeatureMatrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let bank = PrototypeBank::new(2, 2, 0.9).unwrap();
        assert!(matches!(
            pcl_loss(&f, &labels(&[1], &[0.9], 2), &bank, 0.5),
            Err(Error::NoUsablePrototypes)
        ));
    }

    /// Component of `v` orthogonal to every vector in `basis`.
    fn orthogonal_part(v: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
        let mut q: Vec<Vec<f64>> = Vec::new();
        for b in basis {
            let mut u = b.clone();
            for e in &q {
                let d: f64 = u.iter().zip(e).map(|(x, y)| x * y).sum();
                u.iter_mut().zip(e).for_each(|(x, y)| *x -= d * y);
            }
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                q.push(u.iter().map(|x| x / n).collect());
            }
        }
        let mut out = v.to_vec();
        for e in &q {
            let d: f64 = out.iter().zip(e).map(|(x, y)| x * y).sum();
            out.iter_mut().zip(e).for_each(|(x, y)| *x -= d * y);
        }
        out
    }

    #[test]
    fn rotating_toward_prototype_lowers_pcl() {
        // probe direction raises the similarity to the point's own prototype
        // while holding its norm and every other similarity fixed
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let protos: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let classes: Vec<i32> = (0..5).map(|_| rng.random_range(0..3)).collect();
            let l = labels(&classes, &[0.9; 5], 3);
            let bank = bank_with(&protos);
            let f = FeatureMatrix::from_rows(&rows).unwrap();
            let (before, grad) = pcl_loss(&f, &l, &bank, 0.5).unwrap();
            let k = rng.random_range(0..5);
            let y = classes[k] as usize;
            let mut basis = vec![rows[k].clone()];
            basis.extend((0..3).filter(|&c| c != y).map(|c| protos[c].clone()));
            let dir = orthogonal_part(&protos[y], &basis);
            let slope: f64 = grad.row(k).iter().zip(&dir).map(|(g, d)| g * d).sum();
            assert!(slope < 0.0, "slope {slope}");
            let mut moved = f.clone();
            moved.row_mut(k).iter_mut().zip(&dir).for_each(|(m, d)| *m += 1e-3 * d);
            let (after, _) = pcl_loss(&moved, &l, &bank, 0.5).unwrap();
            assert!(after < before, "{after} !< {before}");
        }
    }
}
