use crate::error::{Error, Result};
use crate::model::PointLabels;

use super::FeatureMatrix;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Focal loss `−α(1−p_t)^γ log p_t` on softmaxed logits, with its gradient
/// with respect to the logits.
pub fn focal_loss(logits: &[f64], target: usize, gamma: f64, alpha: f64) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument {
            arg: "target",
            reason: format!("{target} >= {} classes", logits.len()),
        });
    }
    let logp = log_softmax(logits);
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let log_pt = logp[target];
    let pt = p[target];
    // summing the rest keeps 1 − p_t accurate when p_t ≈ 1
    let q: f64 = p.iter().enumerate().filter(|&(k, _)| k != target).map(|(_, v)| v).sum();
    let q_gamma = q.powf(gamma);
    let value = -alpha * q_gamma * log_pt;
    let modulating = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * pt * log_pt
    };
    let common = -alpha * (q_gamma - modulating);
    let grad = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| common * (if k == target { 1.0 } else { 0.0 } - pk))
        .collect();
    Ok((value, grad))
}

/// Confidence-weighted focal loss averaged over labeled points.
/// `logits` is N×C; unlabeled points contribute nothing.
pub fn weighted_cls_loss(
    logits: &FeatureMatrix,
    labels: &PointLabels,
    gamma: f64,
    alpha: f64,
) -> Result<(f64, FeatureMatrix)> {
    if logits.rows != labels.len() || logits.dim != labels.num_classes {
        return Err(Error::SizeMismatch {
            what: "logits",
            expected: labels.len() * labels.num_classes,
            got: logits.rows * logits.dim,
        });
    }
    let mut grad = FeatureMatrix::zeros(logits.rows, logits.dim);
    let labeled: Vec<usize> = (0..labels.len()).filter(|&i| labels.is_labeled(i)).collect();
    if labeled.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / labeled.len() as f64;
    let mut total = 0.0;
    for &i in &labeled {
        let s = labels.confidence[i] as f64;
        let (v, g) = focal_loss(logits.row(i), labels.class_id[i] as usize, gamma, alpha)?;
        total += s * v;
        for (o, gk) in grad.row_mut(i).iter_mut().zip(g) {
            *o = scale * s * gk;
        }
    }
    Ok((total * scale, grad))
}

/// Mean KL divergence from the temperature-softened teacher priors to the
/// temperature-softened student logits, with the gradient with respect to
/// the student logits.
pub fn kl_distill_loss(
    teacher_priors: &FeatureMatrix,
    student_logits: &FeatureMatrix,
    temperature: f64,
) -> Result<(f64, FeatureMatrix)> {
    if teacher_priors.rows != student_logits.rows || teacher_priors.dim != student_logits.dim {
        return Err(Error::SizeMismatch {
            what: "student logits",
            expected: teacher_priors.rows * teacher_priors.dim,
            got: student_logits.rows * student_logits.dim,
        });
    }
    if teacher_priors.rows == 0 {
        return Err(Error::EmptySet("kl distillation points"));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument {
            arg: "temperature",
            reason: "must be positive".into(),
        });
    }
    let m = teacher_priors.rows;
    let scale = 1.0 / m as f64;
    let mut grad = FeatureMatrix::zeros(m, teacher_priors.dim);
    let mut total = 0.0;
    for i in 0..m {
        let t: Vec<f64> = teacher_priors.row(i).iter().map(|v| v / temperature).collect();
        let z: Vec<f64> = student_logits.row(i).iter().map(|v| v / temperature).collect();
        let (log_q, log_s) = (log_softmax(&t), log_softmax(&z));
        let mut kl = 0.0;
        for (lq, ls) in log_q.iter().zip(&log_s) {
            let q = lq.exp();
            if q > 0.0 {
                kl += q * (lq - ls);
            }
        }
        total += kl.max(0.0);
        for ((g, lq), ls) in grad.row_mut(i).iter_mut().zip(&log_q).zip(&log_s) {
            *g = scale * (ls.exp() - lq.exp()) / temperature;
        }
    }
    Ok((total * scale, grad))
}
