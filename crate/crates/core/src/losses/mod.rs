//! Training-loss kernels. Every kernel is a pure function that returns its
//! value together with the gradient with respect to its differentiable
//! inputs, so each can be verified against finite differences in isolation.

mod classification;
mod contrastive;
pub mod gradcheck;
mod prototype;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use classification::{focal_loss, kl_distill_loss, log_softmax, softmax, weighted_cls_loss};
pub use contrastive::{
    aggregate_instance_feature, aggregate_instance_feature_backward, cosine, cross_modal_distill_loss,
    Activation, CrossModalGrads, Projector, ProjectorCache, ProjectorGrads,
};
pub use prototype::{
    estimate_prototypes, pcl_loss, select_reliable_adjacent, select_reliable_current, update_prototypes,
    PrototypeBank, PrototypeSet,
};

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::SizeMismatch {
                what: "feature matrix",
                expected: rows * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument {
                arg: "features",
                reason: "non-finite entry".into(),
            });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::SizeMismatch {
                what: "feature row",
                expected: dim,
                got: bad.len(),
            });
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Mean L1 distance between each foreground point's voted center
/// `point + offset` and its instance center. Gradient is with respect to
/// the offsets; zero when no point is foreground.
pub fn vote_loss(
    points: &FeatureMatrix,
    pred_offsets: &FeatureMatrix,
    target_centers: &FeatureMatrix,
    foreground: &[bool],
) -> Result<(f64, FeatureMatrix)> {
    let n = pred_offsets.rows;
    for (what, m) in [("points", points), ("target centers", target_centers)] {
        if m.rows != n || m.dim != pred_offsets.dim {
            return Err(Error::SizeMismatch {
                what,
                expected: n * pred_offsets.dim,
                got: m.rows * m.dim,
            });
        }
    }
    if foreground.len() != n {
        return Err(Error::SizeMismatch {
            what: "foreground mask",
            expected: n,
            got: foreground.len(),
        });
    }
    let mut grad = FeatureMatrix::zeros(n, pred_offsets.dim);
    let count = foreground.iter().filter(|&&f| f).count();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    for i in (0..n).filter(|&i| foreground[i]) {
        let (p, o, c) = (points.row(i), pred_offsets.row(i), target_centers.row(i));
        let g = grad.row_mut(i);
        for k in 0..p.len() {
            let r = p[k] + o[k] - c[k];
            total += r.abs();
            g[k] = if r > 0.0 {
                scale
            } else if r < 0.0 {
                -scale
            } else {
                0.0
            };
        }
    }
    Ok((total * scale, grad))
}

/// `Σ αₖ·Lₖ` over the weighted-classification, distillation, cross-modal,
/// prototype-contrastive and vote terms.
pub fn total_loss(components: [f64; 5], alphas: [f64; 5]) -> f64 {
    components.iter().zip(&alphas).map(|(l, a)| a * l).sum()
}
