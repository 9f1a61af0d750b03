use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::classification::log_softmax;
use super::FeatureMatrix;

/// Mean of the selected feature rows.
pub fn aggregate_instance_feature(features: &FeatureMatrix, indices: &[usize]) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::EmptySet("instance feature aggregation"));
    }
    let mut out = vec![0.0; features.dim];
    for &i in indices {
        if i >= features.rows {
            return Err(Error::InvalidArgument {
                arg: "indices",
                reason: format!("row {i} out of range for {} rows", features.rows),
            });
        }
        for (o, v) in out.iter_mut().zip(features.row(i)) {
            *o += v;
        }
    }
    let scale = 1.0 / indices.len() as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

/// Gradient of a scalar objective with respect to the point features, given
/// its gradient `upstream` with respect to the aggregated vector.
pub fn aggregate_instance_feature_backward(upstream: &[f64], rows: usize, indices: &[usize]) -> Result<FeatureMatrix> {
    if indices.is_empty() {
        return Err(Error::EmptySet("instance feature aggregation"));
    }
    let mut grad = FeatureMatrix::zeros(rows, upstream.len());
    let scale = 1.0 / indices.len() as f64;
    for &i in indices {
        for (g, u) in grad.row_mut(i).iter_mut().zip(upstream) {
            *g += scale * u;
        }
    }
    Ok(grad)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Adds `scale · ∂cos(a, b)/∂b` into `out`.
pub(crate) fn add_cosine_grad(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return;
    }
    let cos = dot(a, b) / (na * nb);
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (x / (na * nb) - cos * y / (nb * nb));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

/// Two-layer MLP `W₂·act(W₁x + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    /// hidden × input
    pub w1: FeatureMatrix,
    pub b1: Vec<f64>,
    /// output × hidden
    pub w2: FeatureMatrix,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

/// Intermediate values kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ProjectorCache {
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorGrads {
    pub w1: FeatureMatrix,
    pub b1: Vec<f64>,
    pub w2: FeatureMatrix,
    pub b2: Vec<f64>,
}

impl ProjectorGrads {
    pub fn flatten(&self) -> Vec<f64> {
        [&self.w1.data[..], &self.b1, &self.w2.data, &self.b2].concat()
    }
}

impl Projector {
    /// Glorot-normal weights and zero biases.
    pub fn random<R: Rng>(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let mut layer = |rows: usize, cols: usize| {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            FeatureMatrix {
                rows,
                dim: cols,
                data: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
            }
        };
        let w1 = layer(hidden, input);
        let w2 = layer(output, hidden);
        Self {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.dim
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows
    }

    pub fn check(&self) -> Result<()> {
        let ok = self.b1.len() == self.w1.rows && self.w2.dim == self.w1.rows && self.b2.len() == self.w2.rows;
        if !ok {
            return Err(Error::SizeMismatch {
                what: "projector layers",
                expected: self.w1.rows,
                got: self.w2.dim,
            });
        }
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument {
                arg: "projector",
                reason: "non-finite weight".into(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, ProjectorCache) {
        let pre: Vec<f64> = (0..self.w1.rows)
            .map(|h| dot(self.w1.row(h), x) + self.b1[h])
            .collect();
        let hidden: Vec<f64> = pre.iter().map(|&v| self.activation.apply(v)).collect();
        let out = (0..self.w2.rows)
            .map(|o| dot(self.w2.row(o), &hidden) + self.b2[o])
            .collect();
        (out, ProjectorCache { pre, hidden })
    }

    pub fn zero_grads(&self) -> ProjectorGrads {
        ProjectorGrads {
            w1: FeatureMatrix::zeros(self.w1.rows, self.w1.dim),
            b1: vec![0.0; self.b1.len()],
            w2: FeatureMatrix::zeros(self.w2.rows, self.w2.dim),
            b2: vec![0.0; self.b2.len()],
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, x: &[f64], cache: &ProjectorCache, dy: &[f64], grads: &mut ProjectorGrads) -> Vec<f64> {
        let mut dh = vec![0.0; self.w2.dim];
        for (o, &g) in dy.iter().enumerate() {
            grads.b2[o] += g;
            for (h, dhh) in dh.iter_mut().enumerate() {
                grads.w2.data[o * self.w2.dim + h] += g * cache.hidden[h];
                *dhh += g * self.w2.data[o * self.w2.dim + h];
            }
        }
        let mut dx = vec![0.0; self.w1.dim];
        for (h, &g) in dh.iter().enumerate() {
            let dpre = g * self.activation.derivative(cache.pre[h]);
            grads.b1[h] += dpre;
            for (i, dxi) in dx.iter_mut().enumerate() {
                grads.w1.data[h * self.w1.dim + i] += dpre * x[i];
                *dxi += dpre * self.w1.data[h * self.w1.dim + i];
            }
        }
        dx
    }

    /// All parameters in the order of [`ProjectorGrads::flatten`].
    pub fn params(&self) -> Vec<f64> {
        [&self.w1.data[..], &self.b1, &self.w2.data, &self.b2].concat()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut rest = params;
        for dst in [&mut self.w1.data, &mut self.b1, &mut self.w2.data, &mut self.b2] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalGrads {
    pub z3d: FeatureMatrix,
    pub projector: ProjectorGrads,
}

/// Symmetric instance-level InfoNCE between 2D embeddings and projected 3D
/// features.
///
/// With `Sᵢⱼ = cos(z2dᵢ, g(z3dⱼ))/τ`, the 2D→3D term is the row-wise
/// cross-entropy of `S` against the diagonal and the 3D→2D term the
/// column-wise one; the loss is their average.
pub fn cross_modal_distill_loss(
    z2d: &FeatureMatrix,
    z3d: &FeatureMatrix,
    g: &Projector,
    tau: f64,
) -> Result<(f64, CrossModalGrads)> {
    g.check()?;
    let n = z2d.rows;
    if n == 0 {
        return Err(Error::EmptySet("cross-modal instances"));
    }
    if z3d.rows != n {
        return Err(Error::SizeMismatch {
            what: "3d instance features",
            expected: n,
            got: z3d.rows,
        });
    }
    if z3d.dim != g.input_dim() || z2d.dim != g.output_dim() {
        return Err(Error::SizeMismatch {
            what: "projected feature dim",
            expected: z2d.dim,
            got: g.output_dim(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument {
            arg: "tau",
            reason: "must be positive".into(),
        });
    }
    let projected: Vec<(Vec<f64>, ProjectorCache)> = (0..n).map(|j| g.forward(z3d.row(j))).collect();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = cosine(z2d.row(i), &projected[j].0) / tau;
        }
    }
    // dL/dS, accumulated from both directions
    let mut dsim = vec![0.0; n * n];
    let scale = 0.5 / n as f64;
    let mut value = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| sim[i * n + j]).collect();
        let logp = log_softmax(&row);
        value -= logp[i];
        for j in 0..n {
            dsim[i * n + j] += scale * (logp[j].exp() - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| sim[i * n + j]).collect();
        let logp = log_softmax(&col);
        value -= logp[j];
        for i in 0..n {
            dsim[i * n + j] += scale * (logp[i].exp() - if i == j { 1.0 } else { 0.0 });
        }
    }
    value *= scale;

    let mut grads = CrossModalGrads {
        z3d: FeatureMatrix::zeros(n, z3d.dim),
        projector: g.zero_grads(),
    };
    for j in 0..n {
        let (y, cache) = &projected[j];
        let mut dy = vec![0.0; y.len()];
        for i in 0..n {
            add_cosine_grad(z2d.row(i), y, dsim[i * n + j] / tau, &mut dy);
        }
        let dx = g.backward(z3d.row(j), cache, &dy, &mut grads.projector);
        grads.z3d.row_mut(j).copy_from_slice(&dx);
    }
    Ok((value, grads))
}
