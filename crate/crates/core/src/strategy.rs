//! Contact strategies: where the hands hold the object.
//!
//! An [`AffordanceNet`] scores body-frame surface points as grasp locations.
//! A [`ContactDenoiser`] samples per-frame hand anchors by ancestral DDPM,
//! conditioned on an affordance summary, the object shape and its motion.
//! [`ContactGuidance`] then pulls the flow sampler's wrists onto the anchors.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowgen::{canonical_frame, tau_features, transform_trajectory, FlowLayout, FlowState, Guidance, TAU_FEATURES};
use crate::geometry::{BasisPointSet, ObjectSpec, ObjectTrajectory, Pose, SurfacePoint};
use crate::kinematics::{Skeleton, Vec3};
use crate::nnet::{sigmoid, Checkpoint, Mlp, NnetError, Real, Tape, TrainConfig, Trainer};
use crate::synthdata::{object_vertices, vertex_offset, ContactAnchor, ContactFrame, Episode};

/// Basis size of the body-frame shape context.
pub const CONTEXT_DIM: usize = 32;
pub const CONTEXT_RADIUS: f64 = 0.6;
pub const CONTEXT_SEED: u64 = 7;
/// Floor applied to α inside `log α`.
pub const ALPHA_FLOOR: f64 = 1e-6;
/// p (3), n (3), validity (1) per hand.
pub const ANCHOR_WIDTH: usize = 7;
/// Two agents × two hands.
pub const HANDS: usize = 4;
const POSE_WIDTH: usize = 9;
const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

fn mismatch(expected: usize, got: usize) -> StrategyError {
    StrategyError::ShapeMismatch { expected, got }
}

fn bad_checkpoint(m: &str) -> StrategyError {
    StrategyError::Nnet(NnetError::BadCheckpoint(m.into()))
}

/// Body-frame BPS of the object on the fixed context basis.
pub fn object_context(obj: &ObjectSpec) -> Vec<f64> {
    context_basis().encode(obj, &Pose::identity()).values
}

fn context_basis() -> BasisPointSet {
    BasisPointSet::with_center(CONTEXT_DIM, CONTEXT_SEED, Vector3::zeros(), CONTEXT_RADIUS)
}

/// Area under the ROC curve (Mann–Whitney statistic, ties count half).
/// `None` when either class is empty.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * mean_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

// ---------------------------------------------------------------------------
// Affordance

/// Grasp probability of a body-frame surface point given the object's shape
/// context.
#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceNet {
    pub net: Mlp,
}

impl AffordanceNet {
    pub const INPUT: usize = 3 + CONTEXT_DIM;

    pub fn new(hidden: &[usize], seed: u64) -> Self {
        let mut widths = vec![Self::INPUT];
        widths.extend_from_slice(hidden);
        widths.push(1);
        AffordanceNet {
            net: Mlp::new(&widths, seed, 1.0),
        }
    }

    fn input(points: &[Vector3<f64>], context: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(Self::INPUT, points.len());
        for (b, p) in points.iter().enumerate() {
            let mut col = m.column_mut(b);
            col.rows_mut(0, 3).copy_from(p);
            col.rows_mut(3, CONTEXT_DIM).copy_from_slice(context);
        }
        m
    }

    fn check_context(context: &[f64]) -> Result<(), StrategyError> {
        if context.len() != CONTEXT_DIM {
            return Err(mismatch(CONTEXT_DIM, context.len()));
        }
        Ok(())
    }

    pub fn logits(&self, context: &[f64], points: &[Vector3<f64>]) -> Result<Vec<f64>, StrategyError> {
        Self::check_context(context)?;
        if points.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.net.forward(&Self::input(points, context))?;
        Ok(out.iter().map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).collect())
    }

    /// α for each point; logits are clamped to ±30 so α stays inside (0, 1).
    pub fn predict(&self, context: &[f64], points: &[Vector3<f64>]) -> Result<Vec<f64>, StrategyError> {
        Ok(self.logits(context, points)?.into_iter().map(sigmoid).collect())
    }

    /// α at `p` and its gradient with respect to `p`.
    pub fn predict_with_gradient(&self, context: &[f64], p: &Vector3<f64>) -> Result<(f64, Vector3<f64>), StrategyError> {
        Self::check_context(context)?;
        let cache = self.net.forward_cached(&Self::input(std::slice::from_ref(p), context))?;
        let z = cache.output()[(0, 0)];
        if z.abs() > LOGIT_CLAMP {
            return Ok((sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)), Vector3::zeros()));
        }
        let a = sigmoid(z);
        let (_, d_in) = self.net.backward(&cache, &DMatrix::from_element(1, 1, a * (1.0 - a)));
        Ok((a, Vector3::new(d_in[(0, 0)], d_in[(1, 0)], d_in[(2, 0)])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffordanceConfig {
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
}

impl Default for AffordanceConfig {
    fn default() -> Self {
        AffordanceConfig {
            train: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 256,
                epochs: 20,
                cycle_steps: 2000,
                min_lr_ratio: 0.05,
                ..Default::default()
            },
            hidden: vec![64, 64],
        }
    }
}

/// Per-episode affordance samples: shape context plus labelled points.
struct AffordanceSet {
    context: Vec<f64>,
    points: Vec<Vector3<f64>>,
    alpha: Vec<f64>,
}

fn affordance_sets(episodes: &[Episode]) -> Vec<AffordanceSet> {
    episodes
        .par_iter()
        .map(|ep| AffordanceSet {
            context: object_context(&ep.object),
            points: ep.affordance_gt.points.clone(),
            alpha: ep.affordance_gt.alpha.clone(),
        })
        .collect()
}

/// Mean soft-label binary cross-entropy of logits `z` against `y`.
pub fn bce_with_logits(z: &[f64], y: &[f64]) -> f64 {
    let n = z.len().max(1) as f64;
    z.iter()
        .zip(y)
        .map(|(z, y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceTraining {
    pub net: AffordanceNet,
    /// Mean training BCE per epoch.
    pub losses: Vec<f64>,
    /// Held-out AUC separating α > 0.5 from α ≤ 0.5.
    pub val_auc: Option<f64>,
}

/// Held-out AUC of `net` on the ground-truth affordance of `episodes`.
pub fn affordance_auc(net: &AffordanceNet, episodes: &[Episode]) -> Result<Option<f64>, StrategyError> {
    let sets = affordance_sets(episodes);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in &sets {
        scores.extend(net.logits(&s.context, &s.points)?);
        labels.extend(s.alpha.iter().map(|&a| a > 0.5));
    }
    Ok(auc(&scores, &labels))
}

/// Fits an [`AffordanceNet`] to the dense affordance labels of `train` by
/// soft-label BCE.
pub fn train_affordance(
    train: &[Episode],
    val: &[Episode],
    cfg: &AffordanceConfig,
) -> Result<AffordanceTraining, StrategyError> {
    cfg.train.validate()?;
    let sets = affordance_sets(train);
    let index: Vec<(usize, usize)> = sets
        .iter()
        .enumerate()
        .flat_map(|(e, s)| (0..s.points.len()).map(move |i| (e, i)))
        .collect();
    if index.is_empty() {
        return Err(StrategyError::InvalidConfig("no affordance samples".into()));
    }
    let net = AffordanceNet::new(&cfg.hidden, cfg.train.seed);
    let mut trainer = Trainer::new(net.net, &cfg.train)?;
    let mut losses = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order = index.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.train.batch_size) {
            let mut input = DMatrix::zeros(AffordanceNet::INPUT, batch.len());
            let mut y = Vec::with_capacity(batch.len());
            for (b, &(e, i)) in batch.iter().enumerate() {
                let mut col = input.column_mut(b);
                col.rows_mut(0, 3).copy_from(&sets[e].points[i]);
                col.rows_mut(3, CONTEXT_DIM).copy_from_slice(&sets[e].context);
                y.push(sets[e].alpha[i]);
            }
            let cache = trainer.net.forward_cached(&input)?;
            let z: Vec<f64> = cache.output().iter().copied().collect();
            let loss = bce_with_logits(&z, &y);
            let n = batch.len() as f64;
            let d_out = DMatrix::from_iterator(1, batch.len(), z.iter().zip(&y).map(|(z, y)| (sigmoid(*z) - y) / n));
            let (grads, _) = trainer.net.backward(&cache, &d_out);
            trainer.apply(loss, &grads)?;
            total += loss * n;
        }
        let mean = total / index.len() as f64;
        log::debug!("affordance epoch {}: bce {mean:.5}", epoch + 1);
        losses.push(mean);
    }
    let net = AffordanceNet { net: trainer.net };
    let val_auc = if val.is_empty() { None } else { affordance_auc(&net, val)? };
    Ok(AffordanceTraining { net, losses, val_auc })
}

// ---------------------------------------------------------------------------
// Strategy losses

/// Affordance lookup used by the strategy losses.
pub trait AffordanceQuery: Sync {
    /// α at `p` (object body frame) and its gradient with respect to `p`.
    fn alpha_with_gradient(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>);
}

/// Jacobian of the one-step surface projection `p − d(p)·n(p)`:
/// `I − n nᵀ − d ∂n/∂p`, with `∂n/∂p` a central difference of the normal.
pub fn projection_jacobian(obj: &ObjectSpec, p: &Vector3<f64>) -> Matrix3<f64> {
    let id = Pose::identity();
    let d = obj.signed_distance(&id, p);
    let n = obj.sdf_gradient(&id, p);
    let h = 1e-5;
    let mut dn = Matrix3::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = h;
        let col = (obj.sdf_gradient(&id, &(p + e)) - obj.sdf_gradient(&id, &(p - e))) / (2.0 * h);
        dn.set_column(k, &col);
    }
    Matrix3::identity() - n * n.transpose() - dn * d
}

/// α of the surface point nearest to the query, from a trained net.
pub struct SurfaceAffordance<'a> {
    pub net: &'a AffordanceNet,
    pub object: &'a ObjectSpec,
    pub context: Vec<f64>,
}

impl<'a> SurfaceAffordance<'a> {
    pub fn new(net: &'a AffordanceNet, object: &'a ObjectSpec) -> Self {
        SurfaceAffordance {
            net,
            object,
            context: object_context(object),
        }
    }

    pub fn alpha(&self, p: &Vector3<f64>) -> f64 {
        let q = self.object.project_to_surface(&Pose::identity(), p);
        self.net.predict(&self.context, &[q]).expect("context width fixed at construction")[0]
    }
}

impl AffordanceQuery for SurfaceAffordance<'_> {
    fn alpha_with_gradient(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let q = self.object.project_to_surface(&Pose::identity(), p);
        let (a, g) = self
            .net
            .predict_with_gradient(&self.context, &q)
            .expect("context width fixed at construction");
        (a, projection_jacobian(self.object, p).transpose() * g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StrategyLosses {
    pub anchor: f64,
    pub normal: f64,
    pub aff: f64,
}

/// Per-anchor gradients of each strategy loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StrategyGradients {
    /// ∂L_anchor/∂p̂.
    pub anchor: Vec<Vector3<f64>>,
    /// ∂L_normal/∂n̂ (before normalization of n̂).
    pub normal: Vec<Vector3<f64>>,
    /// ∂L_aff/∂p̂.
    pub aff: Vec<Vector3<f64>>,
}

/// A predicted anchor and its reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPair {
    pub p_hat: Vector3<f64>,
    pub n_hat: Vector3<f64>,
    pub p: Vector3<f64>,
    pub n: Vector3<f64>,
    pub s: bool,
}

/// Anchor, normal-alignment and affordance losses with their gradients,
/// normalized by the number of valid reference anchors (all zero when none).
pub fn anchor_losses(pairs: &[AnchorPair], aff: &dyn AffordanceQuery) -> (StrategyLosses, StrategyGradients) {
    let z = pairs.iter().filter(|q| q.s).count();
    let mut grads = StrategyGradients {
        anchor: vec![Vector3::zeros(); pairs.len()],
        normal: vec![Vector3::zeros(); pairs.len()],
        aff: vec![Vector3::zeros(); pairs.len()],
    };
    let mut losses = StrategyLosses::default();
    if z == 0 {
        return (losses, grads);
    }
    let inv = 1.0 / z as f64;
    for (i, q) in pairs.iter().enumerate() {
        if !q.s {
            continue;
        }
        let diff = q.p_hat - q.p;
        losses.anchor += diff.norm_squared() * inv;
        grads.anchor[i] = diff * (2.0 * inv);

        let len = q.n_hat.norm();
        if len > 1e-12 {
            let u = q.n_hat / len;
            let c = u.dot(&q.n);
            losses.normal += (1.0 - c) * inv;
            grads.normal[i] = -(q.n - u * c) * (inv / len);
        } else {
            losses.normal += inv;
        }

        let (a, g) = aff.alpha_with_gradient(&q.p_hat);
        if a > ALPHA_FLOOR {
            losses.aff -= a.ln() * inv;
            grads.aff[i] = -g * (inv / a);
        } else {
            losses.aff -= ALPHA_FLOOR.ln() * inv;
        }
    }
    (losses, grads)
}

fn frame_pairs(pred: &[ContactFrame], gt: &[ContactFrame]) -> Result<Vec<AnchorPair>, StrategyError> {
    if pred.len() != gt.len() {
        return Err(mismatch(gt.len(), pred.len()));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .flat_map(|(f, g)| {
            (0..HANDS).map(move |k| {
                let (a, h) = (k / 2, k % 2);
                let (x, y) = (&f.anchors[a][h], &g.anchors[a][h]);
                AnchorPair {
                    p_hat: x.p,
                    n_hat: x.n,
                    p: y.p,
                    n: y.n,
                    s: y.s,
                }
            })
        })
        .collect())
}

/// Strategy losses of `pred` against `gt`; both streams in the object's body
/// frame, validity taken from `gt`.
pub fn strategy_losses(
    pred: &[ContactFrame],
    gt: &[ContactFrame],
    aff: &dyn AffordanceQuery,
) -> Result<StrategyLosses, StrategyError> {
    Ok(anchor_losses(&frame_pairs(pred, gt)?, aff).0)
}

/// As [`strategy_losses`], with gradients indexed `t * 4 + agent * 2 + hand`.
pub fn strategy_loss_gradients(
    pred: &[ContactFrame],
    gt: &[ContactFrame],
    aff: &dyn AffordanceQuery,
) -> Result<(StrategyLosses, StrategyGradients), StrategyError> {
    Ok(anchor_losses(&frame_pairs(pred, gt)?, aff))
}

// ---------------------------------------------------------------------------
// Anchor streams

/// Contacts re-expressed in the object's body frame at each frame.
pub fn body_frame_contacts(contacts: &[ContactFrame], traj: &ObjectTrajectory) -> Vec<ContactFrame> {
    contacts
        .iter()
        .zip(&traj.poses)
        .map(|(c, pose)| ContactFrame {
            anchors: c.anchors.map(|hands| {
                hands.map(|a| ContactAnchor {
                    p: pose.to_body(&a.p),
                    n: pose.rotation.transpose() * a.n,
                    ..a
                })
            }),
        })
        .collect()
}

/// Flat `[t][agent·2 + hand][p, n, validity]` stream; invalid hands are zeros.
pub fn contacts_to_stream(body: &[ContactFrame]) -> Vec<f64> {
    let mut out = vec![0.0; body.len() * HANDS * ANCHOR_WIDTH];
    for (t, frame) in body.iter().enumerate() {
        for k in 0..HANDS {
            let a = &frame.anchors[k / 2][k % 2];
            if !a.s {
                continue;
            }
            let o = (t * HANDS + k) * ANCHOR_WIDTH;
            out[o..o + 3].copy_from_slice(a.p.as_slice());
            out[o + 3..o + 6].copy_from_slice(a.n.as_slice());
            out[o + 6] = 1.0;
        }
    }
    out
}

/// Snaps a raw body-frame stream onto the object: positions are projected to
/// the surface, normals normalized (the surface normal replaces degenerate
/// ones), validity thresholded at 0.5, and the result mapped to the frames
/// of `traj`.
pub fn stream_to_contacts(
    stream: &[f64],
    object: &ObjectSpec,
    vertices: &[SurfacePoint],
    traj: &ObjectTrajectory,
) -> Result<Vec<ContactFrame>, StrategyError> {
    let frames = traj.len();
    if stream.len() != frames * HANDS * ANCHOR_WIDTH {
        return Err(mismatch(frames * HANDS * ANCHOR_WIDTH, stream.len()));
    }
    let id = Pose::identity();
    Ok((0..frames)
        .map(|t| {
            let pose = &traj.poses[t];
            let anchor = |k: usize| {
                let o = (t * HANDS + k) * ANCHOR_WIDTH;
                let raw = Vector3::new(stream[o], stream[o + 1], stream[o + 2]);
                let p = object.project_to_surface(&id, &raw);
                let n_raw = Vector3::new(stream[o + 3], stream[o + 4], stream[o + 5]);
                let n = if n_raw.norm() > 1e-6 {
                    n_raw.normalize()
                } else {
                    object.sdf_gradient(&id, &p)
                };
                ContactAnchor {
                    p: pose.to_world(&p),
                    n: pose.rotation * n,
                    delta: vertex_offset(vertices, &p),
                    s: stream[o + 6] > 0.5,
                }
            };
            ContactFrame {
                anchors: [[anchor(0), anchor(1)], [anchor(2), anchor(3)]],
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Denoiser

/// Noise schedule of the denoising chain.
///
/// A linear β ramp over `base_steps` steps is respaced to `steps` evenly
/// spaced levels; `betas[i] = 1 − ᾱ_i / ᾱ_{i−1}` are the effective per-step
/// variances of the shortened chain. With `base_steps == steps` this is the
/// plain linear schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, base_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, StrategyError> {
        if steps < 2 || base_steps < steps {
            return Err(StrategyError::InvalidConfig("need 2 <= steps <= base_steps".into()));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(StrategyError::InvalidConfig("need 0 < beta_start < beta_end < 1".into()));
        }
        let mut acc = 1.0;
        let base: Vec<f64> = (0..base_steps)
            .map(|i| {
                acc *= 1.0 - (beta_start + (beta_end - beta_start) * i as f64 / (base_steps - 1) as f64);
                acc
            })
            .collect();
        // level k of the short chain sits at base step round(k · base / steps)
        let alpha_bars: Vec<f64> = (1..=steps)
            .map(|k| base[(k * base_steps + steps / 2) / steps - 1])
            .collect();
        let betas = alpha_bars
            .iter()
            .enumerate()
            .map(|(i, a)| 1.0 - a / if i == 0 { 1.0 } else { alpha_bars[i - 1] })
            .collect();
        Ok(DiffusionSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyLossWeights {
    pub eps: f64,
    pub anchor: f64,
    pub normal: f64,
    pub aff: f64,
}

impl Default for StrategyLossWeights {
    fn default() -> Self {
        StrategyLossWeights {
            eps: 1.0,
            anchor: 100.0,
            normal: 1.0,
            aff: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub steps: usize,
    /// Length of the linear β ramp the chain is respaced from.
    pub base_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub weights: StrategyLossWeights,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 16,
                epochs: 200,
                cycle_steps: 4000,
                min_lr_ratio: 0.05,
                ..Default::default()
            },
            hidden: vec![512, 512],
            steps: 50,
            base_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            weights: StrategyLossWeights::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        self.train.validate()?;
        DiffusionSchedule::linear(self.steps, self.base_steps, self.beta_start, self.beta_end)?;
        let w = &self.weights;
        if [w.eps, w.anchor, w.normal, w.aff].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(StrategyError::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(StrategyError::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Conditioning vector: α at the context basis points snapped to the
/// surface, the shape context, and the canonical object poses.
pub fn strategy_condition(aff: &AffordanceNet, object: &ObjectSpec, traj: &ObjectTrajectory) -> Vec<f64> {
    let context = object_context(object);
    let id = Pose::identity();
    let snapped: Vec<Vector3<f64>> = context_basis()
        .points
        .iter()
        .map(|b| object.project_to_surface(&id, b))
        .collect();
    let mut out = aff.predict(&context, &snapped).expect("context width is fixed");
    out.extend_from_slice(&context);
    let canon = transform_trajectory(traj, &canonical_frame(traj));
    for p in &canon.poses {
        let r = &p.rotation;
        out.extend_from_slice(&[r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]);
        out.extend_from_slice(p.translation.as_slice());
    }
    out
}

fn condition_width(frames: usize) -> usize {
    2 * CONTEXT_DIM + frames * POSE_WIDTH
}

/// ε-prediction DDPM over standardized body-frame anchor streams.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactDenoiser {
    pub frames: usize,
    pub schedule: DiffusionSchedule,
    pub base_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub net: Mlp,
}

impl ContactDenoiser {
    pub const STD_FLOOR: f64 = 0.05;

    pub fn stream_width(frames: usize) -> usize {
        frames * HANDS * ANCHOR_WIDTH
    }

    pub fn new(frames: usize, cfg: &DenoiserConfig, mean: Vec<f64>, std: Vec<f64>) -> Result<Self, StrategyError> {
        cfg.validate()?;
        let d = Self::stream_width(frames);
        if mean.len() != d || std.len() != d {
            return Err(mismatch(d, mean.len().min(std.len())));
        }
        let mut widths = vec![d + TAU_FEATURES + condition_width(frames)];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(d);
        Ok(ContactDenoiser {
            frames,
            schedule: DiffusionSchedule::linear(cfg.steps, cfg.base_steps, cfg.beta_start, cfg.beta_end)?,
            base_steps: cfg.base_steps,
            beta_start: cfg.beta_start,
            beta_end: cfg.beta_end,
            mean,
            std,
            net: Mlp::new(&widths, cfg.train.seed, 0.1),
        })
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| m + v * s).collect()
    }

    /// Network input for standardized noisy streams at 1-based steps.
    fn batch_input(&self, xs: &[&[f64]], steps: &[usize], conds: &[&[f64]]) -> Result<DMatrix<f64>, StrategyError> {
        let d = Self::stream_width(self.frames);
        let cw = condition_width(self.frames);
        let mut m = DMatrix::zeros(self.net.input_width(), xs.len());
        for (b, ((x, &k), c)) in xs.iter().zip(steps).zip(conds).enumerate() {
            if x.len() != d {
                return Err(mismatch(d, x.len()));
            }
            if c.len() != cw {
                return Err(mismatch(cw, c.len()));
            }
            let mut col = m.column_mut(b);
            let col = col.as_mut_slice();
            col[..d].copy_from_slice(x);
            col[d..d + TAU_FEATURES].copy_from_slice(&tau_features(k as f64 / self.schedule.steps() as f64));
            col[d + TAU_FEATURES..].copy_from_slice(c);
        }
        Ok(m)
    }

    /// Skip weight of the noise estimate at step `k`: for unit-variance data
    /// `E[ε | x_k] = √(1 − ᾱ_k) · x_k`, and the network predicts the residual.
    fn skip(&self, k: usize) -> f64 {
        (1.0 - self.schedule.alpha_bars[k - 1]).sqrt()
    }

    fn add_skip(&self, out: &mut DMatrix<f64>, xs: &[&[f64]], steps: &[usize]) {
        for (b, (x, &k)) in xs.iter().zip(steps).enumerate() {
            let c = self.skip(k);
            for (o, v) in out.column_mut(b).iter_mut().zip(x.iter()) {
                *o += c * v;
            }
        }
    }

    /// Predicted noise for one standardized state at 1-based step `k`.
    pub fn predict_noise(&self, x: &[f64], k: usize, cond: &[f64]) -> Result<Vec<f64>, StrategyError> {
        let input = self.batch_input(&[x], &[k], &[cond])?;
        let mut out = self.net.forward(&input)?;
        self.add_skip(&mut out, &[x], &[k]);
        Ok(out.as_slice().to_vec())
    }

    /// Ancestral sampling from seeded noise; returns the raw body-frame
    /// stream (not yet snapped).
    pub fn sample_stream(&self, cond: &[f64], seed: u64) -> Result<Vec<f64>, StrategyError> {
        let d = Self::stream_width(self.frames);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for k in (1..=self.schedule.steps()).rev() {
            let beta = self.schedule.betas[k - 1];
            let abar = self.schedule.alpha_bars[k - 1];
            let eps = self.predict_noise(&x, k, cond)?;
            let c = beta / (1.0 - abar).sqrt();
            let scale = 1.0 / (1.0 - beta).sqrt();
            for (xi, e) in x.iter_mut().zip(&eps) {
                *xi = scale * (*xi - c * e);
            }
            if k > 1 {
                // posterior variance β̃ = β (1 − ᾱ_{k−1}) / (1 − ᾱ_k)
                let sigma = (beta * (1.0 - self.schedule.alpha_bars[k - 2]) / (1.0 - abar)).sqrt();
                for xi in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *xi += sigma * z;
                }
            }
        }
        Ok(self.destandardize(&x))
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "frames": self.frames,
            "steps": self.schedule.steps(),
            "base_steps": self.base_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "mean": self.mean,
            "std": self.std,
        })
    }
}

/// Trained affordance net and contact denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyModel {
    pub affordance: AffordanceNet,
    pub denoiser: ContactDenoiser,
}

impl StrategyModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            metadata: serde_json::json!({"kind": "strategy", "denoiser": self.denoiser.metadata()}),
            nets: vec![
                ("affordance".into(), self.affordance.net.clone()),
                ("denoiser".into(), self.denoiser.net.clone()),
            ],
            ..Default::default()
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, StrategyError> {
        if ck.metadata["kind"] != "strategy" {
            return Err(bad_checkpoint("not a strategy checkpoint"));
        }
        let m = &ck.metadata["denoiser"];
        let usize_field = |k: &str| m[k].as_u64().map(|v| v as usize).ok_or_else(|| bad_checkpoint(k));
        let f64_field = |k: &str| m[k].as_f64().ok_or_else(|| bad_checkpoint(k));
        let vec_field = |k: &str| -> Result<Vec<f64>, StrategyError> {
            serde_json::from_value(m[k].clone()).map_err(|_| bad_checkpoint(k))
        };
        let frames = usize_field("frames")?;
        let (beta_start, beta_end) = (f64_field("beta_start")?, f64_field("beta_end")?);
        let base_steps = usize_field("base_steps")?;
        let schedule = DiffusionSchedule::linear(usize_field("steps")?, base_steps, beta_start, beta_end)?;
        let (mean, std) = (vec_field("mean")?, vec_field("std")?);
        let affordance = ck.net("affordance").ok_or_else(|| bad_checkpoint("missing affordance net"))?.clone();
        let net = ck.net("denoiser").ok_or_else(|| bad_checkpoint("missing denoiser net"))?.clone();
        let d = ContactDenoiser::stream_width(frames);
        if affordance.input_width() != AffordanceNet::INPUT
            || affordance.output_width() != 1
            || net.input_width() != d + TAU_FEATURES + condition_width(frames)
            || net.output_width() != d
            || mean.len() != d
            || std.len() != d
        {
            return Err(bad_checkpoint("network shapes do not match"));
        }
        Ok(StrategyModel {
            affordance: AffordanceNet { net: affordance },
            denoiser: ContactDenoiser {
                frames,
                schedule,
                base_steps,
                beta_start,
                beta_end,
                mean,
                std,
                net,
            },
        })
    }
}

/// One training episode in denoiser form.
struct StrategyExample<'a> {
    x0: Vec<f64>,
    valid: Vec<bool>,
    cond: Vec<f64>,
    object: &'a ObjectSpec,
}

fn strategy_examples<'a>(aff: &AffordanceNet, episodes: &'a [Episode]) -> Vec<StrategyExample<'a>> {
    episodes
        .par_iter()
        .map(|ep| {
            let body = body_frame_contacts(&ep.contacts, &ep.trajectory);
            StrategyExample {
                x0: contacts_to_stream(&body),
                valid: body.iter().flat_map(|f| (0..HANDS).map(move |k| f.anchors[k / 2][k % 2].s)).collect(),
                cond: strategy_condition(aff, &ep.object, &ep.trajectory),
                object: &ep.object,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DenoiserEpoch {
    pub epoch: usize,
    pub eps: f64,
    pub anchor: f64,
    pub normal: f64,
    pub aff: f64,
    pub total: f64,
}

/// Loss and gradient with respect to the predicted noise for one item.
fn denoiser_item(
    model: &ContactDenoiser,
    aff: &AffordanceNet,
    ex: &StrategyExample,
    xt: &[f64],
    eps: &[f64],
    eps_hat: &[f64],
    k: usize,
    w: &StrategyLossWeights,
) -> (DenoiserEpoch, Vec<f64>) {
    let d = eps.len() as f64;
    let mut grad: Vec<f64> = eps_hat.iter().zip(eps).map(|(a, b)| w.eps * 2.0 * (a - b) / d).collect();
    let mut terms = DenoiserEpoch {
        eps: eps_hat.iter().zip(eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d,
        ..Default::default()
    };
    if w.anchor + w.normal + w.aff > 0.0 {
        let abar = model.schedule.alpha_bars[k - 1];
        let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
        let z0: Vec<f64> = xt.iter().zip(eps_hat).map(|(x, e)| (x - sb * e) / sa).collect();
        let x0_hat = model.destandardize(&z0);
        let at = |s: &[f64], o: usize| Vector3::new(s[o], s[o + 1], s[o + 2]);
        let pairs: Vec<AnchorPair> = ex
            .valid
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let o = i * ANCHOR_WIDTH;
                AnchorPair {
                    p_hat: at(&x0_hat, o),
                    n_hat: at(&x0_hat, o + 3),
                    p: at(&ex.x0, o),
                    n: at(&ex.x0, o + 3),
                    s,
                }
            })
            .collect();
        let (losses, g) = anchor_losses(&pairs, &SurfaceAffordance::new(aff, ex.object));
        // weighted by ᾱ: the clean-data estimate is meaningless at high noise
        terms.anchor = abar * losses.anchor;
        terms.normal = abar * losses.normal;
        terms.aff = abar * losses.aff;
        // x̂0 = μ + σ (x_t − sb ε̂) / sa
        let scale = abar * sb / sa;
        for i in 0..pairs.len() {
            let o = i * ANCHOR_WIDTH;
            let gp = g.anchor[i] * w.anchor + g.aff[i] * w.aff;
            let gn = g.normal[i] * w.normal;
            for c in 0..3 {
                grad[o + c] -= scale * model.std[o + c] * gp[c];
                grad[o + 3 + c] -= scale * model.std[o + 3 + c] * gn[c];
            }
        }
    }
    terms.total = w.eps * terms.eps + w.anchor * terms.anchor + w.normal * terms.normal + w.aff * terms.aff;
    (terms, grad)
}

fn fit_standardization(streams: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let d = streams[0].len();
    let n = streams.len() as f64;
    let mut mean = vec![0.0; d];
    for s in streams {
        for (m, v) in mean.iter_mut().zip(s.iter()) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for s in streams {
        for ((q, v), m) in var.iter_mut().zip(s.iter()).zip(&mean) {
            *q += (v - m).powi(2) / n;
        }
    }
    let std = var.into_iter().map(|v| v.sqrt().max(ContactDenoiser::STD_FLOOR)).collect();
    (mean, std)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyTrainConfig {
    pub affordance: AffordanceConfig,
    pub denoiser: DenoiserConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyTraining {
    pub model: StrategyModel,
    pub affordance_losses: Vec<f64>,
    pub val_auc: Option<f64>,
    pub history: Vec<DenoiserEpoch>,
}

/// Trains the affordance net, then the contact denoiser conditioned on it.
pub fn train_strategy(
    train: &[Episode],
    val: &[Episode],
    cfg: &StrategyTrainConfig,
) -> Result<StrategyTraining, StrategyError> {
    cfg.denoiser.validate()?;
    let first = train
        .first()
        .ok_or_else(|| StrategyError::InvalidConfig("empty training set".into()))?;
    let frames = first.len();
    if let Some(ep) = train.iter().find(|e| e.len() != frames || e.contacts.len() != frames) {
        return Err(mismatch(frames, ep.contacts.len().min(ep.len())));
    }
    let aff = train_affordance(train, val, &cfg.affordance)?;
    let examples = strategy_examples(&aff.net, train);
    let (mean, std) = fit_standardization(&examples.iter().map(|e| e.x0.as_slice()).collect::<Vec<_>>());
    let mut model = ContactDenoiser::new(frames, &cfg.denoiser, mean, std)?;
    let mut trainer = Trainer::new(model.net.clone(), &cfg.denoiser.train)?;
    let n_steps = model.schedule.steps();
    let z0: Vec<Vec<f64>> = examples.iter().map(|e| model.standardize(&e.x0)).collect();
    let mut history = Vec::with_capacity(cfg.denoiser.train.epochs);
    for epoch in 0..cfg.denoiser.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.denoiser.train.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = DenoiserEpoch::default();
        for batch in order.chunks(cfg.denoiser.train.batch_size) {
            let mut xts = Vec::with_capacity(batch.len());
            let mut epss = Vec::with_capacity(batch.len());
            let mut ks = Vec::with_capacity(batch.len());
            for &i in batch {
                let k = rng.gen_range(1..=n_steps);
                let abar = model.schedule.alpha_bars[k - 1];
                let eps: Vec<f64> = (0..z0[i].len()).map(|_| rng.sample(StandardNormal)).collect();
                xts.push(
                    z0[i]
                        .iter()
                        .zip(&eps)
                        .map(|(x, e)| abar.sqrt() * x + (1.0 - abar).sqrt() * e)
                        .collect::<Vec<f64>>(),
                );
                epss.push(eps);
                ks.push(k);
            }
            let input = model.batch_input(
                &xts.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
                &ks,
                &batch.iter().map(|&i| examples[i].cond.as_slice()).collect::<Vec<_>>(),
            )?;
            let cache = trainer.net.forward_cached(&input)?;
            let mut out = cache.output().clone();
            model.add_skip(&mut out, &xts.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), &ks);
            let per_item: Vec<(DenoiserEpoch, Vec<f64>)> = (0..batch.len())
                .into_par_iter()
                .map(|b| {
                    let col = out.column(b);
                    denoiser_item(
                        &model,
                        &aff.net,
                        &examples[batch[b]],
                        &xts[b],
                        &epss[b],
                        col.as_slice(),
                        ks[b],
                        &cfg.denoiser.weights,
                    )
                })
                .collect();
            let n = batch.len() as f64;
            let mut d_out = DMatrix::zeros(out.nrows(), out.ncols());
            let mut loss = 0.0;
            for (b, (t, g)) in per_item.iter().enumerate() {
                d_out.column_mut(b).copy_from_slice(g);
                loss += t.total / n;
                sums.eps += t.eps;
                sums.anchor += t.anchor;
                sums.normal += t.normal;
                sums.aff += t.aff;
                sums.total += t.total;
            }
            d_out /= n;
            let (grads, _) = trainer.net.backward(&cache, &d_out);
            trainer.apply(loss, &grads)?;
        }
        let n = examples.len() as f64;
        let e = DenoiserEpoch {
            epoch: epoch + 1,
            eps: sums.eps / n,
            anchor: sums.anchor / n,
            normal: sums.normal / n,
            aff: sums.aff / n,
            total: sums.total / n,
        };
        log::debug!("strategy epoch {}: total {:.5} eps {:.5}", e.epoch, e.total, e.eps);
        history.push(e);
    }
    model.net = trainer.net;
    Ok(StrategyTraining {
        model: StrategyModel {
            affordance: aff.net,
            denoiser: model,
        },
        affordance_losses: aff.losses,
        val_auc: aff.val_auc,
        history,
    })
}

/// Samples a contact strategy for `object` moving along `traj`; anchors are
/// returned in the frames of `traj`.
pub fn sample_strategy(
    model: &StrategyModel,
    object: &ObjectSpec,
    traj: &ObjectTrajectory,
    seed: u64,
) -> Result<Vec<ContactFrame>, StrategyError> {
    if traj.len() != model.denoiser.frames {
        return Err(mismatch(model.denoiser.frames, traj.len()));
    }
    let cond = strategy_condition(&model.affordance, object, traj);
    let stream = model.denoiser.sample_stream(&cond, seed)?;
    stream_to_contacts(&stream, object, &object_vertices(object), traj)
}

// ---------------------------------------------------------------------------
// Contact guidance

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Step size γ of the velocity correction.
    pub gamma_guid: f64,
    /// Evaluate the contact loss on the one-step data estimate
    /// `x_τ + (1 − τ) f` instead of on `x_τ` itself.
    pub lookahead: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            gamma_guid: 0.1,
            lookahead: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        if !(self.gamma_guid.is_finite() && self.gamma_guid >= 0.0) {
            return Err(StrategyError::InvalidConfig("gamma_guid must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Wrist targets per frame and agent: anchor displaced along its normal by
/// the wrist radius, so the wrist sphere touches the surface.
fn wrist_targets(anchors: &[ContactFrame], wrist_radius: f64) -> Vec<[[Option<Vector3<f64>>; 2]; 2]> {
    anchors
        .iter()
        .map(|f| f.anchors.map(|hands| hands.map(|a| a.s.then(|| a.p + a.n * wrist_radius))))
        .collect()
}

/// `(1/Z) Σ V ‖w − (p + r n)‖²` over valid anchors, `Z` their count; zero when
/// there are none.
pub fn contact_loss<S: Real>(
    layout: &FlowLayout,
    skel: &Skeleton,
    x: &[S],
    anchors: &[ContactFrame],
) -> S {
    let zero = x[0].constant_like(0.0);
    let r = skel.joints[skel.wrist_joints[0]].radius;
    let targets = wrist_targets(anchors, r);
    let frames = layout.frames.min(targets.len());
    let mut acc = zero;
    let mut count = 0usize;
    for a in 0..2 {
        let offsets: Vec<Vec3<S>> = skel.scaled_offsets(&layout.shape(x, a));
        for t in 0..frames {
            if targets[t][a].iter().all(Option::is_none) {
                continue;
            }
            let wrists = layout.joint_positions(skel, x, &offsets, t, a, &skel.wrist_joints);
            for (h, target) in targets[t][a].iter().enumerate() {
                if let Some(p) = target {
                    let w = wrists[h];
                    acc = acc + (w[0] - p.x).square() + (w[1] - p.y).square() + (w[2] - p.z).square();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        zero
    } else {
        acc / count as f64
    }
}

/// Sampler hook `f ← f − γ ∇_{x_τ} L_contact`, with anchors given in the
/// sampler's (canonical) frame.
pub struct ContactGuidance<'a> {
    pub skel: &'a Skeleton,
    pub layout: FlowLayout,
    pub anchors: Vec<ContactFrame>,
    pub cfg: GuidanceConfig,
}

impl<'a> ContactGuidance<'a> {
    pub fn new(skel: &'a Skeleton, layout: FlowLayout, anchors: Vec<ContactFrame>, cfg: GuidanceConfig) -> Self {
        ContactGuidance {
            skel,
            layout,
            anchors,
            cfg,
        }
    }

    pub fn active_anchors(&self) -> usize {
        self.anchors
            .iter()
            .take(self.layout.frames)
            .map(|f| f.anchors.iter().flatten().filter(|a| a.s).count())
            .sum()
    }

    pub fn loss(&self, x: &[f64]) -> f64 {
        contact_loss(&self.layout, self.skel, x, &self.anchors)
    }

    /// `L_contact` and its gradient with respect to the state.
    pub fn gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>), NnetError> {
        if x.len() != self.layout.dim() {
            return Err(NnetError::ShapeMismatch {
                expected: self.layout.dim(),
                got: x.len(),
            });
        }
        let tape = Tape::new();
        let vars = tape.vars(x);
        let loss = contact_loss(&self.layout, self.skel, &vars, &self.anchors);
        let g = tape.gradient(loss)?;
        Ok((loss.value(), g.wrt_all(&vars)))
    }
}

impl Guidance for ContactGuidance<'_> {
    fn name(&self) -> &str {
        "contact"
    }

    fn adjust_velocity(&mut self, _step: usize, state: &FlowState, velocity: &mut [f64]) -> Result<(), String> {
        if self.cfg.gamma_guid == 0.0 || self.active_anchors() == 0 {
            return Ok(());
        }
        let (_, g) = if self.cfg.lookahead {
            let ahead: Vec<f64> = state
                .x
                .iter()
                .zip(velocity.iter())
                .map(|(x, v)| x + (1.0 - state.tau) * v)
                .collect();
            self.gradient(&ahead)
        } else {
            self.gradient(&state.x)
        }
        .map_err(|e| e.to_string())?;
        for (v, g) in velocity.iter_mut().zip(&g) {
            *v -= self.cfg.gamma_guid * g;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowgen::{decode, encode};
    use crate::geometry::Primitive;
    use crate::kinematics::forward_kinematics;
    use crate::synthdata::{generate_episode, EpisodeParams};
    use proptest::prelude::*;
    use rand::Rng;

    fn short_params() -> EpisodeParams {
        EpisodeParams {
            frames: 16,
            frame_rate: 8.0,
            ..Default::default()
        }
    }

    fn episode(seed: u64) -> Episode {
        generate_episode(seed, &short_params()).unwrap()
    }

    struct ConstantAlpha(f64);

    impl AffordanceQuery for ConstantAlpha {
        fn alpha_with_gradient(&self, _p: &Vector3<f64>) -> (f64, Vector3<f64>) {
            (self.0, Vector3::zeros())
        }
    }

    fn brute_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &pi) in positive.iter().enumerate() {
            for (j, &pj) in positive.iter().enumerate() {
                if pi && !pj {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_examples() {
        let labels = [false, false, true, true];
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &labels), Some(1.0));
        assert_eq!(auc(&[0.4, 0.3, 0.2, 0.1], &labels), Some(0.0));
        assert_eq!(auc(&[0.5; 4], &labels), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), None);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(
            items in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = items.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<bool> = items.iter().map(|(_, l)| *l).collect();
            match auc(&scores, &labels) {
                Some(a) => prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12),
                None => prop_assert!(labels.iter().all(|&l| l) || labels.iter().all(|&l| !l)),
            }
        }

        #[test]
        fn strategy_losses_ignore_anchor_order(
            raw in proptest::collection::vec(
                (proptest::array::uniform3(-0.3f64..0.3), proptest::array::uniform3(-1.0f64..1.0), any::<bool>()),
                1..24,
            ),
            seed in 0u64..1000,
        ) {
            let pairs: Vec<AnchorPair> = raw
                .iter()
                .enumerate()
                .map(|(i, (p, n, s))| AnchorPair {
                    p_hat: Vector3::from(*p),
                    n_hat: Vector3::from(*n) + Vector3::new(0.0, 0.0, 0.1),
                    p: Vector3::new(0.2, 0.01 * i as f64, 0.0),
                    n: Vector3::x(),
                    s: *s,
                })
                .collect();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let net = AffordanceNet::new(&[8], 3);
            let obj = ObjectSpec::uniform(Primitive::Box { half_extents: [0.2, 0.15, 0.1] }, 5.0).unwrap();
            let aff = SurfaceAffordance::new(&net, &obj);
            let (a, _) = anchor_losses(&pairs, &aff);
            let (b, _) = anchor_losses(&shuffled, &aff);
            prop_assert!((a.anchor - b.anchor).abs() < 1e-12);
            prop_assert!((a.normal - b.normal).abs() < 1e-12);
            prop_assert!((a.aff - b.aff).abs() < 1e-12);
        }
    }

    #[test]
    fn affordance_output_stays_in_open_interval() {
        let mut net = AffordanceNet::new(&[16, 16], 1);
        for w in net.net.weights.iter_mut() {
            *w *= 20.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let context: Vec<f64> = (0..CONTEXT_DIM).map(|_| rng.gen_range(0.0..1.0)).collect();
        let points: Vec<Vector3<f64>> = (0..10_000)
            .map(|_| Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
            .collect();
        let alpha = net.predict(&context, &points).unwrap();
        assert!(alpha.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(net.predict(&context[..3], &points[..1]).is_err());
    }

    #[test]
    fn constant_labels_converge_to_the_constant() {
        let mut eps: Vec<Episode> = (0..6).map(episode).collect();
        for ep in &mut eps {
            ep.affordance_gt.alpha.iter_mut().for_each(|a| *a = 0.5);
        }
        let cfg = AffordanceConfig {
            train: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 128,
                epochs: 4,
                ..Default::default()
            },
            hidden: vec![16],
        };
        let trained = train_affordance(&eps[..4], &eps[4..], &cfg).unwrap();
        assert_eq!(trained.val_auc, None, "all labels tie at 0.5, so no positives");
        for ep in &eps[4..] {
            let alpha = trained
                .net
                .predict(&object_context(&ep.object), &ep.affordance_gt.points)
                .unwrap();
            assert!(alpha.iter().all(|a| (a - 0.5).abs() < 0.05), "{alpha:?}");
        }
    }

    #[test]
    fn bce_matches_direct_formula() {
        let z: [f64; 5] = [-3.0, -0.2, 0.0, 1.5, 40.0];
        let y = [0.0, 0.3, 0.5, 1.0, 0.9];
        let direct: f64 = z
            .iter()
            .zip(&y)
            .map(|(z, y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                let q = 1.0 / (1.0 + z.exp());
                -(y * p.ln() + (1.0 - y) * q.ln())
            })
            .sum::<f64>()
            / 5.0;
        assert!((bce_with_logits(&z, &y) - direct).abs() < 1e-9);
    }

    fn pair(p_hat: Vector3<f64>, n_hat: Vector3<f64>, p: Vector3<f64>, n: Vector3<f64>, s: bool) -> AnchorPair {
        AnchorPair { p_hat, n_hat, p, n, s }
    }

    #[test]
    fn strategy_loss_examples() {
        let p = Vector3::new(0.2, 0.1, 0.0);
        let n = Vector3::x();
        let exact = [pair(p, n, p, n, true), pair(p, n, p, n, true)];
        let (l, _) = anchor_losses(&exact, &ConstantAlpha(1.0));
        assert_eq!((l.anchor, l.normal, l.aff), (0.0, 0.0, 0.0));

        let flipped = [pair(p, -n, p, n, true), pair(p, -n * 3.0, p, n, true)];
        assert!((anchor_losses(&flipped, &ConstantAlpha(1.0)).0.normal - 2.0).abs() < 1e-15);

        let (l, _) = anchor_losses(&exact, &ConstantAlpha((-1.0f64).exp()));
        assert!((l.aff - 1.0).abs() < 1e-15);

        let none = [pair(p * 3.0, -n, p, n, false)];
        let (l, g) = anchor_losses(&none, &ConstantAlpha(0.1));
        assert_eq!((l.anchor, l.normal, l.aff), (0.0, 0.0, 0.0));
        assert_eq!(g.anchor[0], Vector3::zeros());

        // only valid references count, normalized by their number
        let mixed = [pair(p + Vector3::new(0.1, 0.0, 0.0), n, p, n, true), pair(p * 5.0, n, p, n, false)];
        assert!((anchor_losses(&mixed, &ConstantAlpha(1.0)).0.anchor - 0.01).abs() < 1e-15);

        // α below the floor is clamped
        let (l, _) = anchor_losses(&exact, &ConstantAlpha(1e-9));
        assert!((l.aff + ALPHA_FLOOR.ln()).abs() < 1e-12);
    }

    fn fd_check(label: &str, analytic: f64, f: impl Fn(f64) -> f64, x: f64) {
        let h = 1e-6;
        let fd = (f(x + h) - f(x - h)) / (2.0 * h);
        let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
        assert!(err < 1e-4, "{label}: fd {fd} vs analytic {analytic}");
    }

    #[test]
    fn strategy_loss_gradients_match_finite_differences() {
        let objects = [
            ObjectSpec::uniform(Primitive::Box { half_extents: [0.2, 0.15, 0.1] }, 5.0).unwrap(),
            ObjectSpec::uniform(Primitive::Cylinder { radius: 0.18, half_height: 0.2 }, 5.0).unwrap(),
        ];
        let net = AffordanceNet::new(&[16, 16], 9);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for obj in &objects {
            let aff = SurfaceAffordance::new(&net, obj);
            let surface = crate::geometry::sample_surface(obj, 64, 3);
            let pairs: Vec<AnchorPair> = (0..10)
                .map(|i| {
                    let sp = &surface[i * 5];
                    let tangent = Vector3::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01));
                    AnchorPair {
                        p_hat: sp.point + sp.normal * rng.gen_range(0.005..0.03) + tangent,
                        n_hat: sp.normal * rng.gen_range(0.5..2.0)
                            + Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)),
                        p: surface[i * 5 + 1].point,
                        n: surface[i * 5 + 1].normal,
                        s: i % 4 != 3,
                    }
                })
                .collect();
            let (_, g) = anchor_losses(&pairs, &aff);
            for i in 0..pairs.len() {
                for c in 0..3 {
                    let with_p = |v: f64| {
                        let mut q = pairs.clone();
                        q[i].p_hat[c] = v;
                        anchor_losses(&q, &aff).0
                    };
                    let with_n = |v: f64| {
                        let mut q = pairs.clone();
                        q[i].n_hat[c] = v;
                        anchor_losses(&q, &aff).0
                    };
                    fd_check("anchor", g.anchor[i][c], |v| with_p(v).anchor, pairs[i].p_hat[c]);
                    fd_check("aff", g.aff[i][c], |v| with_p(v).aff, pairs[i].p_hat[c]);
                    fd_check("normal", g.normal[i][c], |v| with_n(v).normal, pairs[i].n_hat[c]);
                    checked += 3;
                }
            }
        }
        assert!(checked >= 100);
    }

    #[test]
    fn affordance_input_gradient_matches_finite_differences() {
        let net = AffordanceNet::new(&[16, 16], 2);
        let context: Vec<f64> = (0..CONTEXT_DIM).map(|i| 0.02 * i as f64).collect();
        let p = Vector3::new(0.1, -0.2, 0.05);
        let (_, g) = net.predict_with_gradient(&context, &p).unwrap();
        for c in 0..3 {
            let f = |v: f64| {
                let mut q = p;
                q[c] = v;
                net.predict(&context, &[q]).unwrap()[0]
            };
            fd_check("alpha", g[c], f, p[c]);
        }
    }

    #[test]
    fn schedule_is_increasing_and_reaches_noise() {
        let s = DiffusionSchedule::linear(50, 1000, 1e-4, 2e-2).unwrap();
        assert_eq!(s.steps(), 50);
        assert!(s.betas.windows(2).all(|w| w[1] > w[0]));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(*s.alpha_bars.last().unwrap() < 1e-3);
        // without respacing the plain ramp comes back
        let plain = DiffusionSchedule::linear(50, 50, 1e-4, 2e-2).unwrap();
        for (i, b) in plain.betas.iter().enumerate() {
            assert!((b - (1e-4 + (2e-2 - 1e-4) * i as f64 / 49.0)).abs() < 1e-12);
        }
        assert!(DiffusionSchedule::linear(50, 1000, 2e-2, 1e-4).is_err());
        assert!(DiffusionSchedule::linear(1, 1000, 1e-4, 2e-2).is_err());
    }

    #[test]
    fn streams_round_trip_and_snap_to_surface() {
        let ep = episode(3);
        let body = body_frame_contacts(&ep.contacts, &ep.trajectory);
        let stream = contacts_to_stream(&body);
        assert_eq!(stream.len(), ContactDenoiser::stream_width(16));
        let back = stream_to_contacts(&stream, &ep.object, &object_vertices(&ep.object), &ep.trajectory).unwrap();
        for (t, (a, b)) in ep.contacts.iter().zip(&back).enumerate() {
            for (x, y) in a.anchors.iter().flatten().zip(b.anchors.iter().flatten()) {
                assert_eq!(x.s, y.s);
                assert!(ep.object.signed_distance(&ep.trajectory.poses[t], &y.p).abs() < 1e-6);
                assert!((y.n.norm() - 1.0).abs() < 1e-12);
                if x.s {
                    assert!((x.p - y.p).norm() < 1e-6);
                    assert!((x.n - y.n).norm() < 1e-9);
                    assert!((x.delta - y.delta).norm() < 1e-6);
                }
            }
        }
        // garbage streams still snap
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise: Vec<f64> = stream.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
        let snapped = stream_to_contacts(&noise, &ep.object, &object_vertices(&ep.object), &ep.trajectory).unwrap();
        for (t, f) in snapped.iter().enumerate() {
            for a in f.anchors.iter().flatten() {
                assert!(ep.object.signed_distance(&ep.trajectory.poses[t], &a.p).abs() < 1e-6);
            }
        }
        assert!(stream_to_contacts(&stream[1..], &ep.object, &[], &ep.trajectory).is_err());
    }

    /// Anchors placed exactly where the state's wrist spheres touch.
    fn anchors_at_wrists(skel: &Skeleton, layout: &FlowLayout, x: &[f64]) -> Vec<ContactFrame> {
        let seq = decode(layout, x).unwrap();
        let r = skel.joints[skel.wrist_joints[0]].radius;
        seq.frames
            .iter()
            .map(|f| {
                let anchors = [0, 1].map(|a| {
                    let joints = forward_kinematics(skel, &f[a]).unwrap();
                    [0, 1].map(|h| {
                        let n = Vector3::new(0.3, -0.4, 0.5).normalize();
                        ContactAnchor {
                            p: joints[skel.wrist_joints[h]] - n * r,
                            n,
                            delta: Vector3::zeros(),
                            s: true,
                        }
                    })
                });
                ContactFrame { anchors }
            })
            .collect()
    }

    fn perturbed_state(seed: u64, scale: f64) -> (FlowLayout, Vec<f64>, Episode) {
        let ep = crate::flowgen::canonicalize(&episode(seed));
        let mut x = encode(&ep.motion, 21).unwrap().x;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for v in x.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += scale * z;
        }
        (FlowLayout::new(16, 21, 8.0), x, ep)
    }

    #[test]
    fn wrists_on_anchors_leave_the_flow_unchanged() {
        let skel = Skeleton::default_21();
        let (layout, x, _) = perturbed_state(1, 0.05);
        let anchors = anchors_at_wrists(&skel, &layout, &x);
        let guide = ContactGuidance::new(&skel, layout, anchors, GuidanceConfig::default());
        let (loss, g) = guide.gradient(&x).unwrap();
        assert!(loss < 1e-20, "{loss}");
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn disabled_guidance_is_bitwise_identity() {
        let skel = Skeleton::default_21();
        let (layout, x, ep) = perturbed_state(2, 0.1);
        let state = FlowState { x, tau: 0.4 };
        let v0: Vec<f64> = (0..layout.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut off = ContactGuidance::new(
            &skel,
            layout,
            ep.contacts.clone(),
            GuidanceConfig {
                gamma_guid: 0.0,
                ..Default::default()
            },
        );
        let mut v = v0.clone();
        off.adjust_velocity(3, &state, &mut v).unwrap();
        assert_eq!(v, v0);

        let mut invalid = ep.contacts.clone();
        invalid.iter_mut().flat_map(|f| f.anchors.iter_mut().flatten()).for_each(|a| a.s = false);
        let mut empty = ContactGuidance::new(&skel, layout, invalid, GuidanceConfig::default());
        assert_eq!(empty.active_anchors(), 0);
        let mut v = v0.clone();
        empty.adjust_velocity(3, &state, &mut v).unwrap();
        assert_eq!(v, v0);

        let mut on = ContactGuidance::new(&skel, layout, ep.contacts.clone(), GuidanceConfig::default());
        let mut v = v0.clone();
        on.adjust_velocity(3, &state, &mut v).unwrap();
        assert_ne!(v, v0);
    }

    #[test]
    fn contact_gradient_matches_finite_differences() {
        let skel = Skeleton::default_21();
        let (layout, x, ep) = perturbed_state(4, 0.05);
        let guide = ContactGuidance::new(&skel, layout, ep.contacts.clone(), GuidanceConfig::default());
        let (_, g) = guide.gradient(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // coordinates the loss depends on: rotations and roots of frames with
        // contacts plus the shapes; sample among those with a non-trivial
        // gradient and some arbitrary ones
        let mut coords: Vec<usize> = g
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() > 1e-6)
            .map(|(i, _)| i)
            .collect();
        coords.shuffle(&mut rng);
        coords.truncate(80);
        coords.extend((0..20).map(|_| rng.gen_range(0..x.len())));
        for &i in &coords {
            let f = |v: f64| {
                let mut y = x.clone();
                y[i] = v;
                guide.loss(&y)
            };
            fd_check("contact", g[i], f, x[i]);
        }
    }

    #[test]
    fn guided_step_reduces_contact_loss() {
        let skel = Skeleton::default_21();
        let dt = 1e-3;
        let mut wins = 0;
        let n = 200;
        for i in 0..n {
            let (layout, x, ep) = perturbed_state(i % 8, 0.02 + 0.002 * i as f64);
            let guide = ContactGuidance::new(&skel, layout, ep.contacts.clone(), GuidanceConfig::default());
            let mut rng = ChaCha8Rng::seed_from_u64(i + 50);
            let v: Vec<f64> = (0..x.len()).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut guided = v.clone();
            let mut hook = ContactGuidance::new(&skel, layout, ep.contacts.clone(), GuidanceConfig::default());
            hook.adjust_velocity(0, &FlowState { x: x.clone(), tau: 0.5 }, &mut guided).unwrap();
            let step = |v: &[f64]| -> Vec<f64> { x.iter().zip(v).map(|(a, b)| a + dt * b).collect() };
            if guide.loss(&step(&guided)) < guide.loss(&step(&v)) {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.95 * n as f64, "{wins}/{n}");
    }

    #[test]
    fn strategy_checkpoint_round_trip() {
        let cfg = DenoiserConfig {
            hidden: vec![8],
            ..Default::default()
        };
        let d = ContactDenoiser::stream_width(4);
        let model = StrategyModel {
            affordance: AffordanceNet::new(&[4], 1),
            denoiser: ContactDenoiser::new(4, &cfg, vec![0.1; d], vec![0.5; d]).unwrap(),
        };
        let back = StrategyModel::from_checkpoint(&Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, model);
        let mut ck = model.to_checkpoint();
        ck.metadata["kind"] = serde_json::json!("flow");
        assert!(StrategyModel::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn sampled_strategies_lie_on_the_surface() {
        let eps: Vec<Episode> = (0..6).map(episode).collect();
        let mut cfg = StrategyTrainConfig::default();
        cfg.affordance.train.epochs = 1;
        cfg.affordance.hidden = vec![8];
        cfg.denoiser.train.epochs = 2;
        cfg.denoiser.hidden = vec![16];
        let trained = train_strategy(&eps[..4], &eps[4..], &cfg).unwrap();
        assert_eq!(trained.history.len(), 2);
        assert!(trained.history.iter().all(|h| h.total.is_finite()));
        let ep = &eps[5];
        let a = sample_strategy(&trained.model, &ep.object, &ep.trajectory, 1).unwrap();
        let b = sample_strategy(&trained.model, &ep.object, &ep.trajectory, 1).unwrap();
        assert_eq!(a, b, "sampling is seeded");
        for (t, f) in a.iter().enumerate() {
            for anchor in f.anchors.iter().flatten() {
                assert!(ep.object.signed_distance(&ep.trajectory.poses[t], &anchor.p).abs() < 1e-6);
            }
        }
        let short = ObjectTrajectory {
            poses: ep.trajectory.poses[..5].to_vec(),
            frame_rate: 8.0,
        };
        assert!(sample_strategy(&trained.model, &ep.object, &short, 1).is_err());
    }
}
