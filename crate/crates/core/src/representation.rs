//! Learned state and state-action embeddings trained toward the weighted
//! pair update, with an adaptive reward/next-state coefficient.
//!
//! The state encoder `phi` is a table with one row per state; the
//! state-action encoder `psi` is a single linear layer on
//! `[phi(s); onehot(a)]`. Distances between embeddings use either the MICo
//! angular form or `1 - cosine` (SimSR). Two losses alternate each step:
//!
//! * the encoder loss regresses `G(psi_i, psi_j)` onto
//!   `(1 - c) |r_i - r_j| + c U(phi(s'_i), phi(s'_j))`, holding `c` and the
//!   target embeddings fixed;
//! * the coefficient loss regresses the same target, now as a function of
//!   `c`, onto the fixed prediction.
//!
//! Gradients are written out by hand. The returned gradient types only carry
//! the parameters each loss may update.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{sample_categorical, sample_transition, PolicyTable, TabularMdp, Transition};
use crate::metric::StateMetric;

/// Cosine clip range of the MICo angle.
pub const COS_CLIP: (f64, f64) = (1e-4, 0.9999);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReprError {
    #[error("zero vector in {0}")]
    ZeroVector(&'static str),
    #[error("vectors have dimensions {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("batch size {0} is below 2")]
    BatchTooSmall(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("at step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: Box<ReprError>,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonitorError {
    #[error("trace has no recorded coefficient deltas")]
    EmptyTrace,
    #[error("window {window} exceeds the {available} recorded deltas")]
    WindowTooLarge { window: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Mico,
    Simsr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Squared,
    /// Huber with threshold 1.
    Huber,
}

impl LossKind {
    fn value(self, e: f64) -> f64 {
        match self {
            LossKind::Squared => e * e,
            LossKind::Huber if e.abs() < 1.0 => 0.5 * e * e,
            LossKind::Huber => e.abs() - 0.5,
        }
    }

    fn derivative(self, e: f64) -> f64 {
        match self {
            LossKind::Squared => 2.0 * e,
            LossKind::Huber if e.abs() < 1.0 => e,
            LossKind::Huber => e.signum(),
        }
    }
}

/// Distance family and loss shared by both objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub distance: DistanceKind,
    /// Weight of the angle term in the MICo distance.
    pub beta: f64,
    pub loss: LossKind,
}

fn dot(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    x.dot(&y)
}

fn check_pair(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<(f64, f64), ReprError> {
    if x.len() != y.len() {
        return Err(ReprError::DimensionMismatch(x.len(), y.len()));
    }
    let (nx, ny) = (dot(x, x).sqrt(), dot(y, y).sqrt());
    if nx == 0.0 || ny == 0.0 {
        return Err(ReprError::ZeroVector("distance argument"));
    }
    Ok((nx, ny))
}

/// `(|x| + |y|) / 2 + beta * theta(x, y)` with the cosine clipped to
/// [`COS_CLIP`] before taking the angle.
pub fn distance_mico(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>, beta: f64) -> Result<f64, ReprError> {
    Ok(distance_with_grad(DistanceKind::Mico, beta, x, y, false)?.0)
}

/// `1 - cos(x, y)`, clamped to [0, 2] against rounding.
pub fn distance_simsr(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64, ReprError> {
    Ok(distance_with_grad(DistanceKind::Simsr, 0.0, x, y, false)?.0)
}

pub fn distance(kind: DistanceKind, beta: f64, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64, ReprError> {
    Ok(distance_with_grad(kind, beta, x, y, false)?.0)
}

type DistanceGrad = (f64, Option<(Array1<f64>, Array1<f64>)>);

fn distance_with_grad(
    kind: DistanceKind,
    beta: f64,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
    want_grad: bool,
) -> Result<DistanceGrad, ReprError> {
    let (nx, ny) = check_pair(x, y)?;
    let cos = dot(x, y) / (nx * ny);
    // d cos / dx and d cos / dy.
    let dcos = || {
        (
            &y.mapv(|v| v / (nx * ny)) - &x.mapv(|v| v * cos / (nx * nx)),
            &x.mapv(|v| v / (nx * ny)) - &y.mapv(|v| v * cos / (ny * ny)),
        )
    };
    match kind {
        DistanceKind::Simsr => {
            let d = (1.0 - cos).clamp(0.0, 2.0);
            let grad = want_grad.then(|| {
                let (gx, gy) = dcos();
                (-gx, -gy)
            });
            Ok((d, grad))
        }
        DistanceKind::Mico => {
            let c = cos.clamp(COS_CLIP.0, COS_CLIP.1);
            let sin = (1.0 - c * c).sqrt();
            let theta = sin.atan2(c);
            let d = 0.5 * (nx + ny) + beta * theta;
            let grad = want_grad.then(|| {
                let mut gx = x.mapv(|v| 0.5 * v / nx);
                let mut gy = y.mapv(|v| 0.5 * v / ny);
                if (COS_CLIP.0..=COS_CLIP.1).contains(&cos) {
                    let dtheta = -1.0 / sin;
                    let (cx, cy) = dcos();
                    gx = gx + cx * (beta * dtheta);
                    gy = gy + cy * (beta * dtheta);
                }
                (gx, gy)
            });
            Ok((d, grad))
        }
    }
}

/// `phi`, `psi` and the coefficient logits.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    phi: Array2<f64>,
    psi_weights: Array2<f64>,
    psi_bias: Array1<f64>,
    raw_c: [f64; 2],
    normalize_outputs: bool,
}

/// Gradients of the encoder loss. There is deliberately no entry for the
/// coefficient logits.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub phi: Array2<f64>,
    pub psi_weights: Array2<f64>,
    pub psi_bias: Array1<f64>,
}

/// Gradient of the coefficient loss: the logits only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientGrad {
    pub raw_c: [f64; 2],
}

fn normalize_row(row: ndarray::ArrayViewMut1<'_, f64>) {
    let n = dot(row.view(), row.view()).sqrt();
    if n > 0.0 {
        let mut row = row;
        row.mapv_inplace(|v| v / n);
    }
}

impl EmbeddingModel {
    pub fn from_parts(
        phi: Array2<f64>,
        psi_weights: Array2<f64>,
        psi_bias: Array1<f64>,
        raw_c: [f64; 2],
        normalize_outputs: bool,
    ) -> Result<Self, ReprError> {
        let d = phi.ncols();
        if d < 2 {
            return Err(ReprError::Model(format!("embed_dim {d} is below 2")));
        }
        if phi.nrows() == 0 {
            return Err(ReprError::Model("no states".into()));
        }
        if psi_weights.ncols() != d || psi_weights.nrows() <= d {
            return Err(ReprError::Model(format!(
                "psi weights are {:?}, need (embed_dim + n_actions, {d})",
                psi_weights.dim()
            )));
        }
        if psi_bias.len() != d {
            return Err(ReprError::Model(format!("psi bias has length {}", psi_bias.len())));
        }
        let finite = phi.iter().chain(psi_weights.iter()).chain(psi_bias.iter()).chain(raw_c.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(ReprError::Model("non-finite parameter".into()));
        }
        Ok(Self {
            phi,
            psi_weights,
            psi_bias,
            raw_c,
            normalize_outputs,
        })
    }

    /// Entries uniform in [-0.1, 0.1], zero bias, `raw_c = (0, 0)`; rows of
    /// `phi` are normalized when `normalize_outputs` is set.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        embed_dim: usize,
        normalize_outputs: bool,
    ) -> Result<Self, ReprError> {
        let phi = Array2::from_shape_simple_fn((n_states, embed_dim), || rng.random_range(-0.1..=0.1));
        let w = Array2::from_shape_simple_fn((embed_dim + n_actions, embed_dim), || rng.random_range(-0.1..=0.1));
        let mut model = Self::from_parts(phi, w, Array1::zeros(embed_dim), [0.0, 0.0], normalize_outputs)?;
        if normalize_outputs {
            model.normalize_phi();
        }
        Ok(model)
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.psi_weights.nrows() - self.embed_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn phi(&self) -> &Array2<f64> {
        &self.phi
    }

    pub fn psi_weights(&self) -> &Array2<f64> {
        &self.psi_weights
    }

    pub fn psi_bias(&self) -> &Array1<f64> {
        &self.psi_bias
    }

    pub fn raw_c(&self) -> [f64; 2] {
        self.raw_c
    }

    pub fn set_raw_c(&mut self, raw_c: [f64; 2]) {
        self.raw_c = raw_c;
    }

    pub fn normalize_outputs(&self) -> bool {
        self.normalize_outputs
    }

    fn normalize_phi(&mut self) {
        for row in self.phi.rows_mut() {
            normalize_row(row);
        }
    }

    fn check_state(&self, s: usize) -> Result<(), ReprError> {
        if s < self.n_states() {
            Ok(())
        } else {
            Err(ReprError::IndexOutOfRange {
                what: "state",
                index: s,
                size: self.n_states(),
            })
        }
    }

    /// `phi(s)`, unit-normalized in SimSR mode.
    pub fn encode_state(&self, s: usize) -> Result<Array1<f64>, ReprError> {
        self.check_state(s)?;
        let row = self.phi.row(s).to_owned();
        if self.normalize_outputs {
            let n = dot(row.view(), row.view()).sqrt();
            if n == 0.0 {
                return Err(ReprError::ZeroVector("state embedding"));
            }
            Ok(row / n)
        } else {
            Ok(row)
        }
    }

    /// `psi(phi(s), a) = W^T [phi(s); onehot(a)] + b`, unit-normalized in
    /// SimSR mode.
    pub fn encode_state_action(&self, s: usize, a: usize) -> Result<Array1<f64>, ReprError> {
        Ok(self.forward(s, a)?.out)
    }

    fn forward(&self, s: usize, a: usize) -> Result<Forward, ReprError> {
        if a >= self.n_actions() {
            return Err(ReprError::IndexOutOfRange {
                what: "action",
                index: a,
                size: self.n_actions(),
            });
        }
        let z = self.encode_state(s)?;
        let d = self.embed_dim();
        let w_state = self.psi_weights.slice(ndarray::s![..d, ..]);
        let raw = w_state.t().dot(&z) + self.psi_weights.row(d + a) + &self.psi_bias;
        let raw_norm = dot(raw.view(), raw.view()).sqrt();
        let out = if self.normalize_outputs {
            if raw_norm == 0.0 {
                return Err(ReprError::ZeroVector("state-action embedding"));
            }
            &raw / raw_norm
        } else {
            raw.clone()
        };
        Ok(Forward {
            state: s,
            action: a,
            z,
            raw_norm,
            out,
        })
    }

    /// Softmax of the logits: `(reward weight, next-state weight)`, i.e.
    /// `(1 - c, c)`.
    pub fn coefficient(&self) -> (f64, f64) {
        softmax2(self.raw_c)
    }

    /// Learned `U(phi(s_i), phi(s_j))` over all state pairs.
    pub fn state_distances(&self, kind: DistanceKind, beta: f64) -> Result<StateMetric, ReprError> {
        let z: Vec<Array1<f64>> = (0..self.n_states()).map(|s| self.encode_state(s)).collect::<Result<_, _>>()?;
        let d = pairwise_eval(kind, beta, &stack_rows(&z), false)?.d;
        Ok(StateMetric::from_upper(z.len(), |i, j| d[[i, j]]))
    }

    fn apply_encoder_step(&mut self, grads: &EncoderGrads, lr: f64) {
        self.phi.scaled_add(-lr, &grads.phi);
        self.psi_weights.scaled_add(-lr, &grads.psi_weights);
        self.psi_bias.scaled_add(-lr, &grads.psi_bias);
        if self.normalize_outputs {
            self.normalize_phi();
        }
    }
}

struct Forward {
    state: usize,
    action: usize,
    z: Array1<f64>,
    raw_norm: f64,
    out: Array1<f64>,
}

/// Distances between all rows of `x` (diagonal included) and, on request,
/// the partial derivatives of each entry with respect to `x_i . x_j`, `|x_i|`
/// and `|x_j|`. Both distance families are functions of those three scalars.
struct PairwiseEval {
    d: Array2<f64>,
    norms: Array1<f64>,
    grad: Option<PairwisePartials>,
}

struct PairwisePartials {
    f_dot: Array2<f64>,
    f_ni: Array2<f64>,
    f_nj: Array2<f64>,
}

fn pairwise_eval(kind: DistanceKind, beta: f64, x: &Array2<f64>, want_grad: bool) -> Result<PairwiseEval, ReprError> {
    let b = x.nrows();
    let gram = x.dot(&x.t());
    let norms = Array1::from_shape_fn(b, |i| gram[[i, i]].sqrt());
    if norms.iter().any(|&n| n == 0.0) {
        return Err(ReprError::ZeroVector("distance argument"));
    }
    let mut d = Array2::zeros((b, b));
    let mut partials = want_grad.then(|| PairwisePartials {
        f_dot: Array2::zeros((b, b)),
        f_ni: Array2::zeros((b, b)),
        f_nj: Array2::zeros((b, b)),
    });
    for i in 0..b {
        for j in 0..b {
            let (ni, nj) = (norms[i], norms[j]);
            let cos = gram[[i, j]] / (ni * nj);
            let (value, f_dot, f_ni, f_nj) = match kind {
                DistanceKind::Simsr => ((1.0 - cos).clamp(0.0, 2.0), -1.0 / (ni * nj), cos / ni, cos / nj),
                DistanceKind::Mico => {
                    let c = cos.clamp(COS_CLIP.0, COS_CLIP.1);
                    let sin = (1.0 - c * c).sqrt();
                    let value = 0.5 * (ni + nj) + beta * sin.atan2(c);
                    if (COS_CLIP.0..=COS_CLIP.1).contains(&cos) {
                        let dtheta = -beta / sin;
                        (value, dtheta / (ni * nj), 0.5 - dtheta * cos / ni, 0.5 - dtheta * cos / nj)
                    } else {
                        (value, 0.0, 0.5, 0.5)
                    }
                }
            };
            d[[i, j]] = value;
            if let Some(p) = partials.as_mut() {
                p.f_dot[[i, j]] = f_dot;
                p.f_ni[[i, j]] = f_ni;
                p.f_nj[[i, j]] = f_nj;
            }
        }
    }
    Ok(PairwiseEval { d, norms, grad: partials })
}

impl PairwiseEval {
    /// Backpropagates `g[i][j] = dL / dd[i][j]` to the rows of `x`.
    fn backward(&self, x: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
        let p = self.grad.as_ref().expect("partials were requested");
        let c_dot = g * &p.f_dot;
        let mut out = c_dot.dot(x) + c_dot.t().dot(x);
        let self_coef = (g * &p.f_ni).sum_axis(Axis(1)) + (g * &p.f_nj).sum_axis(Axis(0));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.scaled_add(self_coef[i] / self.norms[i], &x.row(i));
        }
        out
    }
}

fn stack_rows(rows: &[Array1<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, Array1::len);
    let mut out = Array2::zeros((rows.len(), d));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(src);
    }
    out
}

/// Reward gaps and next-state distances for every ordered pair of a batch,
/// diagonal included. Both are constants for either loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseTargets {
    pub reward_gaps: Array2<f64>,
    pub next_distances: Array2<f64>,
}

impl PairwiseTargets {
    /// `(1 - c) |r_i - r_j| + c U(s'_i, s'_j)` for weights `(1 - c, c)`.
    pub fn combine(&self, weights: (f64, f64)) -> Array2<f64> {
        &self.reward_gaps * weights.0 + &self.next_distances * weights.1
    }
}

fn check_batch(batch: &[Transition]) -> Result<(), ReprError> {
    if batch.len() < 2 {
        Err(ReprError::BatchTooSmall(batch.len()))
    } else {
        Ok(())
    }
}

pub fn pairwise_targets(
    model: &EmbeddingModel,
    batch: &[Transition],
    objective: &Objective,
) -> Result<PairwiseTargets, ReprError> {
    check_batch(batch)?;
    let next: Vec<Array1<f64>> = batch.iter().map(|t| model.encode_state(t.next_state)).collect::<Result<_, _>>()?;
    let next_distances = pairwise_eval(objective.distance, objective.beta, &stack_rows(&next), false)?.d;
    let b = batch.len();
    let reward_gaps = Array2::from_shape_fn((b, b), |(i, j)| (batch[i].reward - batch[j].reward).abs());
    Ok(PairwiseTargets {
        reward_gaps,
        next_distances,
    })
}

/// The encoder's regression target with the model's current `c` baked in.
pub fn frozen_target(model: &EmbeddingModel, batch: &[Transition], objective: &Objective) -> Result<Array2<f64>, ReprError> {
    Ok(pairwise_targets(model, batch, objective)?.combine(model.coefficient()))
}

/// `G(psi(phi(s_i), a_i), psi(phi(s_j), a_j))` over the batch.
pub fn pairwise_predictions(model: &EmbeddingModel, batch: &[Transition], objective: &Objective) -> Result<Array2<f64>, ReprError> {
    check_batch(batch)?;
    let enc: Vec<Array1<f64>> = batch
        .iter()
        .map(|t| model.encode_state_action(t.state, t.action))
        .collect::<Result<_, _>>()?;
    Ok(pairwise_eval(objective.distance, objective.beta, &stack_rows(&enc), false)?.d)
}

/// Encoder loss and gradients with the target frozen from the current model.
pub fn encoder_loss_and_grads(
    model: &EmbeddingModel,
    batch: &[Transition],
    objective: &Objective,
) -> Result<(f64, EncoderGrads), ReprError> {
    let target = frozen_target(model, batch, objective)?;
    encoder_loss_with_target(model, batch, &target, objective)
}

/// Encoder loss against a given `B x B` target. Nothing here reads the
/// coefficient logits.
pub fn encoder_loss_with_target(
    model: &EmbeddingModel,
    batch: &[Transition],
    target: &Array2<f64>,
    objective: &Objective,
) -> Result<(f64, EncoderGrads), ReprError> {
    check_batch(batch)?;
    let b = batch.len();
    if target.dim() != (b, b) {
        return Err(ReprError::DimensionMismatch(target.nrows(), b));
    }
    let fwd: Vec<Forward> = batch.iter().map(|t| model.forward(t.state, t.action)).collect::<Result<_, _>>()?;
    let outs = stack_rows(&fwd.iter().map(|f| f.out.clone()).collect::<Vec<_>>());
    let eval = pairwise_eval(objective.distance, objective.beta, &outs, true)?;

    let scale = 1.0 / (b * b) as f64;
    let err = target - &eval.d;
    let loss = err.iter().map(|&e| objective.loss.value(e)).sum::<f64>() * scale;
    // d loss / d pred = -loss'(e).
    let g = err.mapv(|e| -objective.loss.derivative(e) * scale);
    let d_out = eval.backward(&outs, &g);

    let d = model.embed_dim();
    let mut grads = EncoderGrads {
        phi: Array2::zeros(model.phi.dim()),
        psi_weights: Array2::zeros(model.psi_weights.dim()),
        psi_bias: Array1::zeros(d),
    };
    let w_state = model.psi_weights.slice(ndarray::s![..d, ..]);
    for (f, dout) in fwd.iter().zip(d_out.rows()) {
        // Through the output normalization.
        let d_raw = if model.normalize_outputs {
            let proj = dot(f.out.view(), dout);
            (&dout - &(&f.out * proj)) / f.raw_norm
        } else {
            dout.to_owned()
        };
        // Linear layer on [z; onehot(a)].
        for m in 0..d {
            grads.psi_weights.row_mut(m).scaled_add(f.z[m], &d_raw);
        }
        grads.psi_weights.row_mut(d + f.action).scaled_add(1.0, &d_raw);
        grads.psi_bias.scaled_add(1.0, &d_raw);
        let dz = w_state.dot(&d_raw);
        // Through the state normalization.
        let d_phi = if model.normalize_outputs {
            let norm = dot(model.phi.row(f.state), model.phi.row(f.state)).sqrt();
            let proj = dot(f.z.view(), dz.view());
            (&dz - &(&f.z * proj)) / norm
        } else {
            dz
        };
        grads.phi.row_mut(f.state).scaled_add(1.0, &d_phi);
    }
    Ok((loss, grads))
}

/// Coefficient loss and logit gradient with predictions and next-state
/// distances held fixed.
pub fn c_loss_and_grad(
    model: &EmbeddingModel,
    batch: &[Transition],
    objective: &Objective,
) -> Result<(f64, CoefficientGrad), ReprError> {
    let targets = pairwise_targets(model, batch, objective)?;
    let pred = pairwise_predictions(model, batch, objective)?;
    Ok(c_loss_with(model.raw_c, &targets, &pred, objective.loss))
}

/// Coefficient loss for given logits against fixed pieces.
pub fn c_loss_with(raw_c: [f64; 2], targets: &PairwiseTargets, pred: &Array2<f64>, loss_kind: LossKind) -> (f64, CoefficientGrad) {
    let (w0, w1) = softmax2(raw_c);
    let scale = 1.0 / pred.len() as f64;
    let mut loss = 0.0;
    // d loss / d w0 and d loss / d w1.
    let (mut g0, mut g1) = (0.0, 0.0);
    for ((&r, &n), &p) in targets.reward_gaps.iter().zip(&targets.next_distances).zip(pred) {
        let e = w0 * r + w1 * n - p;
        loss += loss_kind.value(e) * scale;
        let de = loss_kind.derivative(e) * scale;
        g0 += de * r;
        g1 += de * n;
    }
    // Softmax Jacobian: d w_k / d raw_m = w_k (delta_km - w_m).
    let mean = w0 * g0 + w1 * g1;
    (
        loss,
        CoefficientGrad {
            raw_c: [w0 * (g0 - mean), w1 * (g1 - mean)],
        },
    )
}

fn softmax2(raw: [f64; 2]) -> (f64, f64) {
    let m = raw[0].max(raw[1]);
    let e0 = (raw[0] - m).exp();
    let e1 = (raw[1] - m).exp();
    (e0 / (e0 + e1), e1 / (e0 + e1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub distance: DistanceKind,
    pub beta: f64,
    pub embed_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub c_learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub c_record_interval: usize,
    /// FIFO replay capacity.
    pub buffer_capacity: usize,
    /// Steps between resets to a uniformly drawn start state.
    pub episode_length: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            distance: DistanceKind::Simsr,
            beta: 0.1,
            embed_dim: 8,
            batch_size: 64,
            learning_rate: 1e-3,
            c_learning_rate: 1e-4,
            steps: 20_000,
            seed: 0,
            loss: LossKind::Squared,
            c_record_interval: 250,
            buffer_capacity: 10_000,
            episode_length: 10,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> Objective {
        Objective {
            distance: self.distance,
            beta: self.beta,
            loss: self.loss,
        }
    }

    pub fn validate(&self) -> Result<(), ReprError> {
        let bad = |msg: String| Err(ReprError::Config(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} is below 2", self.batch_size));
        }
        if self.embed_dim < 2 {
            return bad(format!("embed_dim {} is below 2", self.embed_dim));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        // Zero freezes c.
        if !(self.c_learning_rate >= 0.0 && self.c_learning_rate.is_finite()) {
            return bad(format!("c_learning_rate {} must be nonnegative", self.c_learning_rate));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} must be nonnegative", self.beta));
        }
        if self.c_record_interval == 0 || self.buffer_capacity == 0 || self.episode_length == 0 {
            return bad("record interval, buffer capacity and episode length must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    /// Encoder loss before each step's update.
    pub encoder_losses: Vec<f64>,
    pub c_losses: Vec<f64>,
    /// 1-based step index of each coefficient record.
    pub c_steps: Vec<usize>,
    /// Next-state weight `c` at each record.
    pub c_values: Vec<f64>,
    /// `|c_n - c_{n-1}|`; the first record is compared with the initial `c`.
    pub c_deltas: Vec<f64>,
    pub final_distance_table: StateMetric,
}

/// Bounded FIFO of collected transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: std::collections::VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: std::collections::VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Transition> {
        (0..n).map(|_| self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// Runs the alternating encoder / coefficient updates. The model is updated
/// in place; the returned trace is bit-identical for identical inputs.
pub fn train(
    model: &mut EmbeddingModel,
    mdp: &TabularMdp,
    policy: &PolicyTable,
    config: &TrainConfig,
) -> Result<TrainTrace, ReprError> {
    config.validate()?;
    if model.normalize_outputs() != (config.distance == DistanceKind::Simsr) {
        return Err(ReprError::Config("output normalization must be on exactly in SimSR mode".into()));
    }
    if model.n_states() != mdp.n_states() || model.n_actions() != mdp.n_actions() {
        return Err(ReprError::Config(format!(
            "model is for {}x{} states x actions, MDP has {}x{}",
            model.n_states(),
            model.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    let objective = config.objective();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let uniform_start = Array1::from_elem(mdp.n_states(), 1.0 / mdp.n_states() as f64);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);

    let mut trace = TrainTrace {
        encoder_losses: Vec::with_capacity(config.steps),
        c_losses: Vec::with_capacity(config.steps),
        c_steps: Vec::new(),
        c_values: Vec::new(),
        c_deltas: Vec::new(),
        final_distance_table: StateMetric::zeros(0),
    };
    let mut last_c = model.coefficient().1;
    let mut state = 0;
    for step in 0..config.steps {
        let at = |e: ReprError| ReprError::Training {
            step: step + 1,
            source: Box::new(e),
        };
        if step % config.episode_length == 0 {
            state = sample_categorical(uniform_start.view(), &mut rng);
        }
        let t = sample_transition(mdp, policy, &mut rng, state)
            .map_err(|e| at(ReprError::Config(e.to_string())))?;
        state = t.next_state;
        buffer.push(t);
        let batch = buffer.sample(&mut rng, config.batch_size);

        let (loss, grads) = encoder_loss_and_grads(model, &batch, &objective).map_err(at)?;
        model.apply_encoder_step(&grads, config.learning_rate);
        let (c_loss, c_grad) = c_loss_and_grad(model, &batch, &objective).map_err(at)?;
        model.raw_c[0] -= config.c_learning_rate * c_grad.raw_c[0];
        model.raw_c[1] -= config.c_learning_rate * c_grad.raw_c[1];
        trace.encoder_losses.push(loss);
        trace.c_losses.push(c_loss);

        if (step + 1) % config.c_record_interval == 0 {
            let c = model.coefficient().1;
            trace.c_steps.push(step + 1);
            trace.c_values.push(c);
            trace.c_deltas.push((c - last_c).abs());
            last_c = c;
        }
    }
    trace.final_distance_table = model.state_distances(config.distance, config.beta)?;
    Ok(trace)
}

/// Whether the coefficient has settled over the last `window` records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientReport {
    pub satisfied: bool,
    pub max_tail_delta: f64,
    pub final_c: f64,
    pub epsilon: f64,
    pub window: usize,
}

pub fn monitor_c(trace: &TrainTrace, epsilon: f64, window: usize) -> Result<CoefficientReport, MonitorError> {
    let available = trace.c_deltas.len();
    if available == 0 {
        return Err(MonitorError::EmptyTrace);
    }
    if window > available {
        return Err(MonitorError::WindowTooLarge { window, available });
    }
    let max_tail_delta = trace.c_deltas[available - window..].iter().fold(0.0, |m: f64, &d| m.max(d));
    Ok(CoefficientReport {
        satisfied: max_tail_delta <= epsilon,
        max_tail_delta,
        final_c: *trace.c_values.last().expect("values recorded with deltas"),
        epsilon,
        window,
    })
}
