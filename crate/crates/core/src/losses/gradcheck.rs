//! Central finite-difference verification of every loss kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::PointLabels;

use super::{
    aggregate_instance_feature, aggregate_instance_feature_backward, cross_modal_distill_loss, focal_loss,
    kl_distill_loss, pcl_loss, vote_loss, weighted_cls_loss, Activation, FeatureMatrix, Projector, PrototypeBank,
    PrototypeSet,
};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Focal,
    WeightedCls,
    KlDistill,
    AggregateInstanceFeature,
    CrossModalDistill,
    Pcl,
    Vote,
}

impl Kernel {
    pub const ALL: [Kernel; 7] = [
        Kernel::Focal,
        Kernel::WeightedCls,
        Kernel::KlDistill,
        Kernel::AggregateInstanceFeature,
        Kernel::CrossModalDistill,
        Kernel::Pcl,
        Kernel::Vote,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Focal => "focal",
            Kernel::WeightedCls => "weighted_cls",
            Kernel::KlDistill => "kl_distill",
            Kernel::AggregateInstanceFeature => "aggregate_instance_feature",
            Kernel::CrossModalDistill => "cross_modal_distill",
            Kernel::Pcl => "pcl",
            Kernel::Vote => "vote",
        }
    }

    pub fn from_name(name: &str) -> Option<Kernel> {
        Kernel::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both gradients vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = scale(analytic).max(scale(numeric));
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + STEP;
            let up = f(&probe);
            probe[k] = orig - STEP;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, c: usize, background_prob: f64) -> PointLabels {
    let mut labels = PointLabels::background(n, c);
    for i in 0..n {
        if rng.random_bool(background_prob) {
            continue;
        }
        let class = rng.random_range(0..c);
        let conf = rng.random_range(0.05f32..1.0);
        let mut row = vec![0.0f32; c];
        row[class] = conf;
        labels.set_point(i, 0, conf, &row);
    }
    // keep at least one labeled point
    if labels.labeled_count() == 0 {
        let mut row = vec![0.0f32; c];
        row[0] = 0.5;
        labels.set_point(0, 0, 0.5, &row);
    }
    labels
}

/// Analytic and numeric gradients for one random instance of `kernel`.
fn trial(kernel: Kernel, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    match kernel {
        Kernel::Focal => {
            let c = rng.random_range(2..6);
            let z = uniform(rng, c, -3.0, 3.0);
            let t = rng.random_range(0..c);
            let gamma = [0.0, 0.5, 1.0, 2.0, 3.0][rng.random_range(0..5)];
            let alpha = rng.random_range(0.1..1.0);
            let (_, g) = focal_loss(&z, t, gamma, alpha).expect("valid target");
            let n = numeric_gradient(&z, |x| focal_loss(x, t, gamma, alpha).expect("valid target").0);
            (g, n)
        }
        Kernel::WeightedCls => {
            let (n_pts, c) = (rng.random_range(1..10), rng.random_range(2..5));
            let labels = random_labels(rng, n_pts, c, 0.3);
            let z = uniform(rng, n_pts * c, -3.0, 3.0);
            let f = |x: &[f64]| {
                let m = FeatureMatrix::new(n_pts, c, x.to_vec()).expect("shape");
                weighted_cls_loss(&m, &labels, 2.0, 0.25).expect("shape")
            };
            let g = f(&z).1.data;
            (g, numeric_gradient(&z, |x| f(x).0))
        }
        Kernel::KlDistill => {
            let (m, c) = (rng.random_range(1..10), rng.random_range(2..5));
            let temp = rng.random_range(0.5..3.0);
            let teacher = FeatureMatrix::new(m, c, uniform(rng, m * c, 0.0, 1.0)).expect("shape");
            let z = uniform(rng, m * c, -3.0, 3.0);
            let f = |x: &[f64]| {
                let s = FeatureMatrix::new(m, c, x.to_vec()).expect("shape");
                kl_distill_loss(&teacher, &s, temp).expect("shape")
            };
            let g = f(&z).1.data;
            (g, numeric_gradient(&z, |x| f(x).0))
        }
        Kernel::AggregateInstanceFeature => {
            let (rows, d) = (rng.random_range(1..10), rng.random_range(1..6));
            let mut idx: Vec<usize> = (0..rows).filter(|_| rng.random_bool(0.6)).collect();
            if idx.is_empty() {
                idx.push(rng.random_range(0..rows));
            }
            // scalar probe w·z
            let w = uniform(rng, d, -1.0, 1.0);
            let x = uniform(rng, rows * d, -2.0, 2.0);
            let f = |x: &[f64]| {
                let m = FeatureMatrix::new(rows, d, x.to_vec()).expect("shape");
                let z = aggregate_instance_feature(&m, &idx).expect("non-empty");
                z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            };
            let g = aggregate_instance_feature_backward(&w, rows, &idx).expect("non-empty").data;
            (g, numeric_gradient(&x, f))
        }
        Kernel::CrossModalDistill => {
            let n = rng.random_range(1..9);
            let (e, d, h) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..8));
            let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
            let mut g = Projector::random(d, h, e, act, rng);
            g.b1 = uniform(rng, h, -0.5, 0.5);
            g.b2 = uniform(rng, e, -0.5, 0.5);
            let tau = rng.random_range(0.1..1.0);
            let z2 = FeatureMatrix::new(n, e, uniform(rng, n * e, -1.0, 1.0)).expect("shape");
            let z3 = uniform(rng, n * d, -1.0, 1.0);
            let params = g.params();
            let x: Vec<f64> = [z3.clone(), params].concat();
            let f = |x: &[f64]| {
                let (z3x, px) = x.split_at(n * d);
                let mut gx = g.clone();
                gx.set_params(px);
                let z3m = FeatureMatrix::new(n, d, z3x.to_vec()).expect("shape");
                cross_modal_distill_loss(&z2, &z3m, &gx, tau).expect("shape")
            };
            let (_, grads) = f(&x);
            let analytic = [grads.z3d.data, grads.projector.flatten()].concat();
            (analytic, numeric_gradient(&x, |x| f(x).0))
        }
        Kernel::Pcl => {
            let (n, c, d) = (rng.random_range(1..8), rng.random_range(2..5), rng.random_range(2..6));
            let labels = random_labels(rng, n, c, 0.2);
            let set = |rng: &mut ChaCha8Rng| {
                let mut s = PrototypeSet {
                    prototypes: FeatureMatrix::new(c, d, uniform(rng, c * d, -1.0, 1.0)).expect("shape"),
                    initialized: (0..c).map(|_| rng.random_bool(0.8)).collect(),
                };
                for i in 0..n {
                    if labels.is_labeled(i) {
                        s.initialized[labels.class_id[i] as usize] = true;
                    }
                }
                s
            };
            let bank = PrototypeBank {
                current: set(rng),
                adjacent: set(rng),
                theta: 0.9,
            };
            let tau = rng.random_range(0.1..1.0);
            let x = uniform(rng, n * d, -1.0, 1.0);
            let f = |x: &[f64]| {
                let m = FeatureMatrix::new(n, d, x.to_vec()).expect("shape");
                pcl_loss(&m, &labels, &bank, tau).expect("usable prototypes")
            };
            let g = f(&x).1.data;
            (g, numeric_gradient(&x, |x| f(x).0))
        }
        Kernel::Vote => {
            let n = rng.random_range(1..10);
            let p = FeatureMatrix::new(n, 3, uniform(rng, n * 3, -5.0, 5.0)).expect("shape");
            let c = FeatureMatrix::new(n, 3, uniform(rng, n * 3, -5.0, 5.0)).expect("shape");
            let fg: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            let o = uniform(rng, n * 3, -2.0, 2.0);
            let f = |x: &[f64]| {
                let om = FeatureMatrix::new(n, 3, x.to_vec()).expect("shape");
                vote_loss(&p, &om, &c, &fg).expect("shape")
            };
            let g = f(&o).1.data;
            (g, numeric_gradient(&o, |x| f(x).0))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub kernel: Kernel,
    pub trials: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Runs `trials` seeded checks of `kernel`. With `sign_flip` the analytic
/// gradient is negated, which must make the check fail.
pub fn check_kernel(kernel: Kernel, seed: u64, trials: usize, sign_flip: bool) -> KernelReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kernel as u64 + 1);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (mut analytic, numeric) = trial(kernel, &mut rng);
        if sign_flip {
            analytic.iter_mut().for_each(|v| *v = -*v);
        }
        let err = relative_error(&analytic, &numeric);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    KernelReport {
        kernel,
        trials,
        max_relative_error: worst,
        passed: worst <= TOLERANCE,
    }
}

/// Checks every kernel; `sign_flip` names a kernel whose gradient is
/// deliberately corrupted.
pub fn check_all(seed: u64, trials: usize, sign_flip: Option<Kernel>) -> Vec<KernelReport> {
    Kernel::ALL
        .iter()
        .map(|&k| check_kernel(k, seed, trials, sign_flip == Some(k)))
        .collect()
}
