//! Conditional flow matching over dual-agent motion windows.
//!
//! A motion window is flattened into a [`FlowState`]; a dense network
//! predicts the velocity of the linear path from Gaussian noise to data and
//! a K-step Euler integrator with optional guidance hooks turns it back into
//! motion. All learning happens in a canonical scene frame where the object
//! starts above the origin with zero yaw (see [`canonicalize`]).

use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{bps_encode, ObjectSpec, ObjectTrajectory, Pose};
use crate::kinematics::{
    fk_subset, gram_schmidt, identity_like, mat3_to_na, matrix_to_rot6d, yaw_of, AgentPose, Mat3, MotionSequence,
    Rot6D, Skeleton, Vec3, SHAPE_DIM,
};
use crate::nnet::{Checkpoint, Mlp, NnetError, Real, RngState, Tape, TrainConfig, Trainer, Var};
use crate::synthdata::{ContactAnchor, ContactFrame, Episode};

/// Width of the noise-level embedding fed to the network.
pub const TAU_FEATURES: usize = 7;
/// Object rotation (6D) and translation per frame.
pub const POSE_FEATURES: usize = 9;
/// Four hands × (p, n, delta, s).
pub const ANCHOR_FEATURES: usize = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error("guidance hook `{hook}` failed at step {step}: {message}")]
    Hook {
        hook: String,
        step: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("bad motion file: {0}")]
    BadFormat(String),
    #[error("io: {0}")]
    Io(String),
}

fn mismatch(expected: usize, got: usize) -> FlowError {
    FlowError::ShapeMismatch { expected, got }
}

// ---------------------------------------------------------------------------
// State layout

/// Index map of the flat state: per frame and agent the 6D local rotations
/// followed by the root translation, then one shape vector per agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowLayout {
    pub frames: usize,
    pub joints: usize,
    pub frame_rate: f64,
}

impl FlowLayout {
    pub fn new(frames: usize, joints: usize, frame_rate: f64) -> Self {
        FlowLayout {
            frames,
            joints,
            frame_rate,
        }
    }

    pub fn agent_width(&self) -> usize {
        self.joints * 6 + 3
    }

    pub fn dim(&self) -> usize {
        self.frames * 2 * self.agent_width() + 2 * SHAPE_DIM
    }

    pub fn rot(&self, t: usize, a: usize, j: usize) -> usize {
        (t * 2 + a) * self.agent_width() + j * 6
    }

    pub fn gamma(&self, t: usize, a: usize) -> usize {
        (t * 2 + a) * self.agent_width() + self.joints * 6
    }

    pub fn beta(&self, a: usize) -> usize {
        self.frames * 2 * self.agent_width() + a * SHAPE_DIM
    }

    /// Local rotation of joint `j`, re-orthonormalized; degenerate blocks
    /// decode to the identity.
    pub fn rotation<S: Real>(&self, x: &[S], t: usize, a: usize, j: usize) -> Mat3<S> {
        let i = self.rot(t, a, j);
        let block = [x[i], x[i + 1], x[i + 2], x[i + 3], x[i + 4], x[i + 5]];
        gram_schmidt(&block).unwrap_or_else(|| identity_like(x[i].constant_like(1.0)))
    }

    pub fn root_translation<S: Real>(&self, x: &[S], t: usize, a: usize) -> Vec3<S> {
        let i = self.gamma(t, a);
        [x[i], x[i + 1], x[i + 2]]
    }

    pub fn shape<S: Real>(&self, x: &[S], a: usize) -> [S; SHAPE_DIM] {
        let i = self.beta(a);
        std::array::from_fn(|k| x[i + k])
    }

    /// World positions of `wanted` joints of agent `a` at frame `t`.
    pub fn joint_positions<S: Real>(
        &self,
        skel: &Skeleton,
        x: &[S],
        offsets: &[Vec3<S>],
        t: usize,
        a: usize,
        wanted: &[usize],
    ) -> Vec<Vec3<S>> {
        fk_subset(
            skel,
            |j| self.rotation(x, t, a, j),
            offsets,
            self.root_translation(x, t, a),
            wanted,
        )
    }
}

/// A point on the noise-to-data path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: Vec<f64>,
    pub tau: f64,
}

pub fn encode(seq: &MotionSequence, joints: usize) -> Result<FlowState, FlowError> {
    let layout = FlowLayout::new(seq.len(), joints, seq.frame_rate);
    let mut x = vec![0.0; layout.dim()];
    for (t, frame) in seq.frames.iter().enumerate() {
        for (a, pose) in frame.iter().enumerate() {
            if pose.theta.len() != joints {
                return Err(mismatch(joints, pose.theta.len()));
            }
            for (j, r) in pose.theta.iter().enumerate() {
                let i = layout.rot(t, a, j);
                x[i..i + 6].copy_from_slice(&r.0);
            }
            let i = layout.gamma(t, a);
            x[i..i + 3].copy_from_slice(pose.gamma.as_slice());
        }
    }
    if let Some(first) = seq.frames.first() {
        for a in 0..2 {
            let i = layout.beta(a);
            x[i..i + SHAPE_DIM].copy_from_slice(&first[a].beta);
        }
    }
    Ok(FlowState { x, tau: 1.0 })
}

pub fn decode(layout: &FlowLayout, x: &[f64]) -> Result<MotionSequence, FlowError> {
    if x.len() != layout.dim() {
        return Err(mismatch(layout.dim(), x.len()));
    }
    let beta = [layout.shape(x, 0), layout.shape(x, 1)];
    let frames = (0..layout.frames)
        .map(|t| {
            std::array::from_fn(|a| AgentPose {
                theta: (0..layout.joints)
                    .map(|j| Rot6D::from_matrix(&mat3_to_na(&layout.rotation(x, t, a, j))))
                    .collect(),
                beta: beta[a],
                gamma: Vector3::from(layout.root_translation(x, t, a)),
            })
        })
        .collect();
    Ok(MotionSequence {
        frames,
        frame_rate: layout.frame_rate,
    })
}

// ---------------------------------------------------------------------------
// Canonical frame

/// World → canonical transform: removes the object's initial horizontal
/// position and yaw.
pub fn canonical_frame(traj: &ObjectTrajectory) -> Pose {
    let Some(first) = traj.poses.first() else {
        return Pose::identity();
    };
    let yaw = yaw_of(&first.rotation);
    let rot = *nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), -yaw).matrix();
    let shift = Vector3::new(first.translation.x, first.translation.y, 0.0);
    Pose::new(rot, -(rot * shift))
}

pub fn transform_motion(seq: &MotionSequence, g: &Pose) -> MotionSequence {
    let mut out = seq.clone();
    for frame in &mut out.frames {
        for pose in frame.iter_mut() {
            let root = g.rotation * pose.theta[0].to_matrix_or_identity();
            pose.theta[0] = matrix_to_rot6d(&root);
            pose.gamma = g.to_world(&pose.gamma);
        }
    }
    out
}

pub fn transform_trajectory(traj: &ObjectTrajectory, g: &Pose) -> ObjectTrajectory {
    ObjectTrajectory {
        poses: traj.poses.iter().map(|p| g.compose(p)).collect(),
        frame_rate: traj.frame_rate,
    }
}

pub fn transform_contacts(contacts: &[ContactFrame], g: &Pose) -> Vec<ContactFrame> {
    contacts
        .iter()
        .map(|c| ContactFrame {
            anchors: c.anchors.map(|hands| {
                hands.map(|a| ContactAnchor {
                    p: g.to_world(&a.p),
                    n: g.rotation * a.n,
                    ..a
                })
            }),
        })
        .collect()
}

/// The episode expressed in its canonical frame.
pub fn canonicalize(ep: &Episode) -> Episode {
    let g = canonical_frame(&ep.trajectory);
    Episode {
        motion: transform_motion(&ep.motion, &g),
        trajectory: transform_trajectory(&ep.trajectory, &g),
        contacts: transform_contacts(&ep.contacts, &g),
        ..ep.clone()
    }
}

// ---------------------------------------------------------------------------
// Condition

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionConfig {
    pub bps_dim: usize,
    pub bps_seed: u64,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        ConditionConfig {
            bps_dim: crate::geometry::DEFAULT_BPS_DIM,
            bps_seed: 0,
        }
    }
}

/// Per-frame conditioning signal. Disabled blocks are fed as zeros with a
/// cleared presence flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub object_pose: Vec<[f64; POSE_FEATURES]>,
    pub bps: Vec<Vec<f64>>,
    pub anchors: Vec<[f64; ANCHOR_FEATURES]>,
    pub use_bps: bool,
    pub use_anchors: bool,
}

pub fn anchor_features(frame: &ContactFrame) -> [f64; ANCHOR_FEATURES] {
    let mut out = [0.0; ANCHOR_FEATURES];
    for a in 0..2 {
        for h in 0..2 {
            let anchor = &frame.anchors[a][h];
            if !anchor.s {
                continue;
            }
            let o = (a * 2 + h) * 10;
            out[o..o + 3].copy_from_slice(anchor.p.as_slice());
            out[o + 3..o + 6].copy_from_slice(anchor.n.as_slice());
            out[o + 6..o + 9].copy_from_slice(anchor.delta.as_slice());
            out[o + 9] = 1.0;
        }
    }
    out
}

impl Condition {
    pub fn new(
        object: &ObjectSpec,
        traj: &ObjectTrajectory,
        contacts: Option<&[ContactFrame]>,
        cfg: &ConditionConfig,
    ) -> Result<Self, FlowError> {
        if let Some(c) = contacts {
            if c.len() != traj.len() {
                return Err(mismatch(traj.len(), c.len()));
            }
        }
        let object_pose = traj
            .poses
            .iter()
            .map(|p| {
                let r = matrix_to_rot6d(&p.rotation).0;
                let d = p.translation;
                [r[0], r[1], r[2], r[3], r[4], r[5], d.x, d.y, d.z]
            })
            .collect();
        let bps = traj
            .poses
            .iter()
            .map(|p| bps_encode(object, p, cfg.bps_dim, cfg.bps_seed).values)
            .collect();
        let anchors = match contacts {
            Some(c) => c.iter().map(anchor_features).collect(),
            None => vec![[0.0; ANCHOR_FEATURES]; traj.len()],
        };
        Ok(Condition {
            object_pose,
            bps,
            anchors,
            use_bps: true,
            use_anchors: contacts.is_some(),
        })
    }

    pub fn frames(&self) -> usize {
        self.object_pose.len()
    }

    pub fn with_blocks(&self, use_bps: bool, use_anchors: bool) -> Self {
        Condition {
            use_bps,
            use_anchors,
            ..self.clone()
        }
    }

    pub fn feature_width(frames: usize, bps_dim: usize) -> usize {
        frames * (POSE_FEATURES + bps_dim + ANCHOR_FEATURES) + 2
    }

    pub fn features(&self, bps_dim: usize) -> Vec<f64> {
        let frames = self.frames();
        let mut out = Vec::with_capacity(Self::feature_width(frames, bps_dim));
        for p in &self.object_pose {
            out.extend_from_slice(p);
        }
        for b in &self.bps {
            if self.use_bps {
                out.extend_from_slice(b);
            } else {
                out.extend(std::iter::repeat(0.0).take(b.len()));
            }
        }
        for a in &self.anchors {
            if self.use_anchors {
                out.extend_from_slice(a);
            } else {
                out.extend_from_slice(&[0.0; ANCHOR_FEATURES]);
            }
        }
        out.push(f64::from(u8::from(self.use_bps)));
        out.push(f64::from(u8::from(self.use_anchors)));
        out
    }
}

// ---------------------------------------------------------------------------
// Model

pub fn tau_features(tau: f64) -> [f64; TAU_FEATURES] {
    use std::f64::consts::PI;
    [
        tau,
        (PI * tau).sin(),
        (PI * tau).cos(),
        (2.0 * PI * tau).sin(),
        (2.0 * PI * tau).cos(),
        (4.0 * PI * tau).sin(),
        (4.0 * PI * tau).cos(),
    ]
}

/// Per-dimension Gaussian preconditioning of the velocity field.
///
/// With data statistics `(μ, σ)` per entry, the velocity that is optimal for
/// Gaussian data is affine in `x_τ`; the network only predicts the remaining
/// residual at unit scale:
/// `f = μ + k(τ)(x_τ − τμ) + c(τ) · net((x_τ − τμ) / s(τ), τ, c)` with
/// `s² = (1−τ)² + τ²σ²`, `k = (τσ² − (1−τ)) / s²` and `c = σ / s`.
/// This gives the network a direct path for every state entry, which a
/// narrow hidden layer could not provide on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Preconditioner {
    pub const STD_FLOOR: f64 = 0.01;

    pub fn fit(data: &[&[f64]]) -> Self {
        let dim = data.first().map_or(0, |x| x.len());
        let n = data.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for x in data {
            for (m, v) in mean.iter_mut().zip(x.iter()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for x in data {
            for ((s, v), m) in var.iter_mut().zip(x.iter()).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        Preconditioner {
            mean,
            std: var.into_iter().map(|v| v.sqrt().max(Self::STD_FLOOR)).collect(),
        }
    }

    fn coefficients(&self, i: usize, tau: f64) -> (f64, f64, f64) {
        let s2 = self.std[i] * self.std[i];
        let scale = ((1.0 - tau).powi(2) + tau * tau * s2).sqrt();
        let skip = (tau * s2 - (1.0 - tau)) / (scale * scale);
        (scale, skip, self.std[i] / scale)
    }
}

/// Velocity network `f(x_τ, τ, c)` with its state layout, condition
/// settings and optional preconditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub layout: FlowLayout,
    pub condition: ConditionConfig,
    pub precond: Option<Preconditioner>,
    pub net: Mlp,
}

impl FlowModel {
    pub fn input_width(layout: &FlowLayout, condition: &ConditionConfig) -> usize {
        layout.dim() + TAU_FEATURES + Condition::feature_width(layout.frames, condition.bps_dim)
    }

    pub fn new(layout: FlowLayout, condition: ConditionConfig, hidden: &[usize], seed: u64) -> Self {
        let mut widths = vec![Self::input_width(&layout, &condition)];
        widths.extend_from_slice(hidden);
        widths.push(layout.dim());
        FlowModel {
            layout,
            condition,
            precond: None,
            net: Mlp::new(&widths, seed, 0.1),
        }
    }

    pub fn with_preconditioner(mut self, p: Preconditioner) -> Self {
        self.precond = Some(p);
        self
    }

    pub fn check_condition(&self, cond: &Condition) -> Result<(), FlowError> {
        if cond.frames() != self.layout.frames {
            return Err(mismatch(self.layout.frames, cond.frames()));
        }
        if let Some(b) = cond.bps.iter().find(|b| b.len() != self.condition.bps_dim) {
            return Err(mismatch(self.condition.bps_dim, b.len()));
        }
        Ok(())
    }

    fn check_inputs(&self, x: &[f64], cond_features: &[f64]) -> Result<(), FlowError> {
        if x.len() != self.layout.dim() {
            return Err(mismatch(self.layout.dim(), x.len()));
        }
        let expected = self.net.input_width() - x.len() - TAU_FEATURES;
        if cond_features.len() != expected {
            return Err(mismatch(expected, cond_features.len()));
        }
        Ok(())
    }

    fn write_input(&self, col: &mut [f64], x: &[f64], tau: f64, cond_features: &[f64]) {
        let d = x.len();
        match &self.precond {
            Some(p) => {
                for (i, (c, v)) in col[..d].iter_mut().zip(x).enumerate() {
                    let (scale, _, _) = p.coefficients(i, tau);
                    *c = (v - tau * p.mean[i]) / scale;
                }
            }
            None => col[..d].copy_from_slice(x),
        }
        col[d..d + TAU_FEATURES].copy_from_slice(&tau_features(tau));
        col[d + TAU_FEATURES..].copy_from_slice(cond_features);
    }

    /// Network inputs for a batch, one column per item.
    pub fn batch_input(&self, xs: &[&[f64]], taus: &[f64], conds: &[&[f64]]) -> DMatrix<f64> {
        let width = self.net.input_width();
        let mut m = DMatrix::zeros(width, xs.len());
        for (b, ((x, tau), c)) in xs.iter().zip(taus).zip(conds).enumerate() {
            self.write_input(m.column_mut(b).as_mut_slice(), x, *tau, c);
        }
        m
    }

    /// Velocities for a batch together with the network cache and the
    /// per-entry output scales `df / d(net output)`.
    fn forward_batch(
        &self,
        xs: &[&[f64]],
        taus: &[f64],
        conds: &[&[f64]],
    ) -> Result<(DMatrix<f64>, crate::nnet::ForwardCache, DMatrix<f64>), FlowError> {
        for (x, c) in xs.iter().zip(conds) {
            self.check_inputs(x, c)?;
        }
        let cache = self.net.forward_cached(&self.batch_input(xs, taus, conds))?;
        let mut f = cache.output().clone();
        let mut scales = DMatrix::from_element(f.nrows(), f.ncols(), 1.0);
        if let Some(p) = &self.precond {
            for (b, (x, tau)) in xs.iter().zip(taus).enumerate() {
                for (i, v) in x.iter().enumerate() {
                    let (_, skip, out) = p.coefficients(i, *tau);
                    f[(i, b)] = p.mean[i] + skip * (v - tau * p.mean[i]) + out * f[(i, b)];
                    scales[(i, b)] = out;
                }
            }
        }
        Ok((f, cache, scales))
    }

    pub fn velocity(&self, x: &[f64], tau: f64, cond_features: &[f64]) -> Result<Vec<f64>, FlowError> {
        let (f, _, _) = self.forward_batch(&[x], &[tau], &[cond_features])?;
        Ok(f.as_slice().to_vec())
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "flow",
            "layout": self.layout,
            "condition": self.condition,
            "preconditioner": self.precond,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, FlowError> {
        let bad = |m: &str| FlowError::Nnet(NnetError::BadCheckpoint(m.into()));
        if ck.metadata.get("kind").and_then(|k| k.as_str()) != Some("flow") {
            return Err(bad("not a flow checkpoint"));
        }
        let layout: FlowLayout =
            serde_json::from_value(ck.metadata["layout"].clone()).map_err(|_| bad("missing layout"))?;
        let condition: ConditionConfig =
            serde_json::from_value(ck.metadata["condition"].clone()).map_err(|_| bad("missing condition"))?;
        let precond: Option<Preconditioner> = serde_json::from_value(ck.metadata["preconditioner"].clone())
            .map_err(|_| bad("malformed preconditioner"))?;
        let net = ck.net("flow").ok_or_else(|| bad("missing flow network"))?.clone();
        if net.input_width() != Self::input_width(&layout, &condition) || net.output_width() != layout.dim() {
            return Err(bad("network shape does not match layout"));
        }
        if precond
            .as_ref()
            .is_some_and(|p| p.mean.len() != layout.dim() || p.std.len() != layout.dim())
        {
            return Err(bad("preconditioner size does not match layout"));
        }
        Ok(FlowModel {
            layout,
            condition,
            precond,
            net,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            metadata: self.metadata(),
            nets: vec![("flow".into(), self.net.clone())],
            ..Default::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Losses

/// `‖f − (x1 − x0)‖²` for one item.
pub fn flow_item_loss(f: &[f64], x0: &[f64], x1: &[f64]) -> f64 {
    f.iter()
        .zip(x0.iter().zip(x1))
        .map(|(f, (a, b))| (f - (b - a)).powi(2))
        .sum()
}

/// Batch mean of the per-item flow objective. Items are `(x0, x1, tau)`.
pub fn flow_loss(
    model: &FlowModel,
    items: &[(Vec<f64>, Vec<f64>, f64)],
    cond_features: &[Vec<f64>],
) -> Result<f64, FlowError> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let xt: Vec<Vec<f64>> = items.iter().map(|(x0, x1, tau)| interpolate(x0, x1, *tau)).collect();
    let (out, _, _) = model.forward_batch(
        &xt.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
        &items.iter().map(|i| i.2).collect::<Vec<_>>(),
        &cond_features.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
    )?;
    let total: f64 = items
        .iter()
        .enumerate()
        .map(|(b, (x0, x1, _))| flow_item_loss(out.column(b).as_slice(), x0, x1))
        .sum();
    let loss = total / items.len() as f64;
    if !loss.is_finite() {
        return Err(NnetError::NonFiniteLoss {
            step: 0,
            detail: format!("flow loss = {loss}"),
        }
        .into());
    }
    Ok(loss)
}

pub fn interpolate(x0: &[f64], x1: &[f64], tau: f64) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| (1.0 - tau) * a + tau * b).collect()
}

/// Elementwise L1 between a predicted and a reference state.
pub fn smpl_loss(xhat: &[f64], x1: &[f64]) -> f64 {
    xhat.iter().zip(x1).map(|(a, b)| (a - b).abs()).sum()
}

/// Squared foot displacement between consecutive frames on frames where the
/// foot is marked in contact, divided by the number of marked entries.
/// `mask[t][a][k]` refers to `skel.foot_joints[k]`.
pub fn foot_loss<S: Real>(layout: &FlowLayout, skel: &Skeleton, x: &[S], mask: &[[Vec<bool>; 2]]) -> S {
    let zero = x[0].constant_like(0.0);
    let frames = layout.frames.min(mask.len());
    let mut count = 0usize;
    let mut acc = zero;
    for a in 0..2 {
        let offsets = skel.scaled_offsets(&layout.shape(x, a));
        let mut prev: Option<Vec<Vec3<S>>> = None;
        for t in 0..frames {
            let needed = t + 1 < frames && mask[t][a].iter().any(|&m| m);
            let prev_needed = t > 0 && mask[t - 1][a].iter().any(|&m| m);
            if !needed && !prev_needed {
                prev = None;
                continue;
            }
            let cur = layout.joint_positions(skel, x, &offsets, t, a, &skel.foot_joints);
            if prev_needed {
                let p = prev.as_ref().expect("previous frame evaluated");
                for (k, &m) in mask[t - 1][a].iter().enumerate() {
                    if m {
                        let d = [cur[k][0] - p[k][0], cur[k][1] - p[k][1], cur[k][2] - p[k][2]];
                        acc = acc + d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                        count += 1;
                    }
                }
            }
            prev = Some(cur);
        }
    }
    if count == 0 {
        zero
    } else {
        acc / count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxLosses {
    pub smpl: f64,
    pub foot: f64,
}

/// Reconstruction and foot-sliding terms for a decoded prediction against the
/// ground-truth episode.
pub fn aux_losses(skel: &Skeleton, decoded: &MotionSequence, gt: &Episode) -> Result<AuxLosses, FlowError> {
    if decoded.len() != gt.len() {
        return Err(mismatch(gt.len(), decoded.len()));
    }
    let xhat = encode(decoded, skel.joint_count())?;
    let x1 = encode(&gt.motion, skel.joint_count())?;
    let layout = FlowLayout::new(gt.len(), skel.joint_count(), gt.motion.frame_rate);
    Ok(AuxLosses {
        smpl: smpl_loss(&xhat.x, &x1.x),
        foot: foot_loss(&layout, skel, &xhat.x, &gt.foot_mask),
    })
}

/// Differentiable realism score used as an extra training term.
pub trait MotionPrior: Sync {
    /// `-Σ_k log D_k` of the decoded state, recorded on `tape`.
    fn neg_log_score<'t>(&self, tape: &'t Tape, layout: &FlowLayout, x: &[Var<'t>]) -> Result<Var<'t>, NnetError>;
}

/// A prior whose discriminators keep learning while the generator trains.
pub trait AdversarialPrior: MotionPrior {
    /// One discriminator update on data states (`real`) against the
    /// generator's one-step predictions (`fake`). Returns the BCE loss.
    fn discriminator_step(&mut self, layout: &FlowLayout, real: &[&[f64]], fake: &[&[f64]]) -> Result<f64, NnetError>;
}

enum PriorMode<'p> {
    Off,
    Frozen(&'p dyn MotionPrior),
    Adversarial(&'p mut dyn AdversarialPrior),
}

impl PriorMode<'_> {
    fn frozen(&self) -> Option<&dyn MotionPrior> {
        match self {
            PriorMode::Off => None,
            PriorMode::Frozen(p) => Some(*p),
            PriorMode::Adversarial(p) => Some(&**p),
        }
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub flow: f64,
    pub smpl: f64,
    pub foot: f64,
    pub prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            flow: 1.0,
            smpl: 1.0,
            foot: 1.0,
            prior: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub weights: LossWeights,
    pub condition: ConditionConfig,
    /// Probability of hiding the BPS block for one training item.
    pub bps_dropout: f64,
    /// Probability of hiding the contact-anchor block for one training item.
    pub anchor_dropout: f64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            train: TrainConfig::default(),
            hidden: vec![256, 256, 256],
            weights: LossWeights::default(),
            condition: ConditionConfig::default(),
            bps_dropout: 0.0,
            anchor_dropout: 0.0,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        self.train.validate()?;
        let w = &self.weights;
        if [w.flow, w.smpl, w.foot, w.prior].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(FlowError::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.bps_dropout) || !(0.0..=1.0).contains(&self.anchor_dropout) {
            return Err(FlowError::InvalidConfig("dropout probabilities must lie in [0, 1]".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(FlowError::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// A canonicalized training episode in network form.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowExample {
    pub x1: Vec<f64>,
    pub cond: Condition,
    pub foot_mask: Vec<[Vec<bool>; 2]>,
    pub frame_rate: f64,
}

impl FlowExample {
    pub fn from_episode(ep: &Episode, joints: usize, cfg: &ConditionConfig) -> Result<Self, FlowError> {
        let c = canonicalize(ep);
        Ok(FlowExample {
            x1: encode(&c.motion, joints)?.x,
            cond: Condition::new(&c.object, &c.trajectory, Some(&c.contacts), cfg)?,
            foot_mask: c.foot_mask,
            frame_rate: c.motion.frame_rate,
        })
    }
}

pub fn prepare_examples(episodes: &[Episode], joints: usize, cfg: &ConditionConfig) -> Result<Vec<FlowExample>, FlowError> {
    episodes
        .par_iter()
        .map(|ep| FlowExample::from_episode(ep, joints, cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub flow: f64,
    pub smpl: f64,
    pub foot: f64,
    pub prior: f64,
    pub total: f64,
    /// Flow loss on held-out examples with fixed noise, when any are given.
    pub val_flow: Option<f64>,
}

struct BatchItem<'a> {
    ex: &'a FlowExample,
    x0: Vec<f64>,
    tau: f64,
    cond: Vec<f64>,
}

#[derive(Default)]
struct BatchTerms {
    flow: f64,
    smpl: f64,
    foot: f64,
    prior: f64,
}

/// Total loss and parameter gradient of one batch.
fn batch_gradient(
    model: &FlowModel,
    skel: &Skeleton,
    items: &[BatchItem],
    weights: &LossWeights,
    prior: Option<&dyn MotionPrior>,
) -> Result<(f64, Vec<f64>, BatchTerms, Vec<Vec<f64>>), FlowError> {
    let layout = model.layout;
    let n = items.len() as f64;
    let xt: Vec<Vec<f64>> = items.iter().map(|it| interpolate(&it.x0, &it.ex.x1, it.tau)).collect();
    let (out, cache, scales) = model.forward_batch(
        &xt.iter().map(|v| v.as_slice()).collect::<Vec<_>>(),
        &items.iter().map(|it| it.tau).collect::<Vec<_>>(),
        &items.iter().map(|it| it.cond.as_slice()).collect::<Vec<_>>(),
    )?;
    let use_foot = weights.foot > 0.0;
    let use_prior = weights.prior > 0.0 && prior.is_some();

    let per_item: Vec<Result<(Vec<f64>, BatchTerms, Vec<f64>), NnetError>> = items
        .par_iter()
        .enumerate()
        .map(|(b, it)| {
            let f = out.column(b);
            let f = f.as_slice();
            let one_minus = 1.0 - it.tau;
            let xhat: Vec<f64> = xt[b].iter().zip(f).map(|(x, v)| x + one_minus * v).collect();
            let mut terms = BatchTerms {
                flow: flow_item_loss(f, &it.x0, &it.ex.x1),
                smpl: smpl_loss(&xhat, &it.ex.x1),
                ..Default::default()
            };
            // d total / d f for this item
            let mut grad: Vec<f64> = f
                .iter()
                .zip(it.x0.iter().zip(&it.ex.x1))
                .zip(xhat.iter())
                .map(|((v, (a, b1)), xh)| {
                    let flow = 2.0 * (v - (b1 - a));
                    let sign = if xh > b1 {
                        1.0
                    } else if xh < b1 {
                        -1.0
                    } else {
                        0.0
                    };
                    (weights.flow * flow + weights.smpl * one_minus * sign) / n
                })
                .collect();
            if use_foot || use_prior {
                let tape = Tape::new();
                let vars = tape.vars(&xhat);
                let mut head = tape.constant(0.0);
                if use_foot {
                    let lf = foot_loss(&layout, skel, &vars, &it.ex.foot_mask);
                    terms.foot = lf.value();
                    head = head + lf * weights.foot;
                }
                if use_prior {
                    let lp = prior.unwrap().neg_log_score(&tape, &layout, &vars)?;
                    terms.prior = lp.value();
                    head = head + lp * weights.prior;
                }
                let g = tape.gradient(head)?;
                for (gi, v) in grad.iter_mut().zip(&vars) {
                    *gi += g.wrt(*v) * one_minus / n;
                }
            }
            Ok((grad, terms, xhat))
        })
        .collect();

    let mut d_out = DMatrix::zeros(out.nrows(), out.ncols());
    let mut terms = BatchTerms::default();
    let mut xhats = Vec::with_capacity(items.len());
    for (b, r) in per_item.into_iter().enumerate() {
        let (g, t, xhat) = r?;
        xhats.push(xhat);
        d_out.column_mut(b).copy_from_slice(&g);
        terms.flow += t.flow / n;
        terms.smpl += t.smpl / n;
        terms.foot += t.foot / n;
        terms.prior += t.prior / n;
    }
    let total = weights.flow * terms.flow + weights.smpl * terms.smpl + weights.foot * terms.foot + weights.prior * terms.prior;
    let (grads, _) = model.net.backward(&cache, &d_out.component_mul(&scales));
    Ok((total, grads, terms, xhats))
}

/// Weighted training loss of `(example, x0, τ)` items under full
/// conditioning, and its gradient over the network parameters.
pub fn training_loss_gradient(
    model: &FlowModel,
    skel: &Skeleton,
    items: &[(&FlowExample, Vec<f64>, f64)],
    weights: &LossWeights,
    prior: Option<&dyn MotionPrior>,
) -> Result<(f64, Vec<f64>), FlowError> {
    let batch: Vec<BatchItem> = items
        .iter()
        .map(|(ex, x0, tau)| BatchItem {
            ex,
            x0: x0.clone(),
            tau: *tau,
            cond: ex.cond.features(model.condition.bps_dim),
        })
        .collect();
    let (total, grads, _, _) = batch_gradient(model, skel, &batch, weights, prior)?;
    Ok((total, grads))
}

/// Mean flow loss over held-out examples with noise and τ fixed by `seed`,
/// full conditioning.
pub fn validation_flow_loss(model: &FlowModel, examples: &[FlowExample], seed: u64) -> Result<f64, FlowError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.layout.dim();
    let mut total = 0.0;
    for chunk in examples.chunks(16) {
        let items: Vec<(Vec<f64>, Vec<f64>, f64)> = chunk
            .iter()
            .map(|ex| {
                let x0 = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                (x0, ex.x1.clone(), rng.gen_range(0.0..1.0))
            })
            .collect();
        let conds: Vec<Vec<f64>> = chunk.iter().map(|ex| ex.cond.features(model.condition.bps_dim)).collect();
        total += flow_loss(model, &items, &conds)? * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

const VALIDATION_SEED_SALT: u64 = 0x7a11_da7e;

/// Resumable flow training state.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrainer {
    pub model: FlowModel,
    pub trainer: Trainer,
    pub cfg: FlowTrainConfig,
    pub epoch: usize,
    pub history: Vec<EpochLosses>,
}

impl FlowTrainer {
    pub fn new(layout: FlowLayout, cfg: FlowTrainConfig, precond: Option<Preconditioner>) -> Result<Self, FlowError> {
        cfg.validate()?;
        if let Some(p) = &precond {
            if p.mean.len() != layout.dim() || p.std.len() != layout.dim() {
                return Err(mismatch(layout.dim(), p.mean.len().min(p.std.len())));
            }
        }
        let mut model = FlowModel::new(layout, cfg.condition, &cfg.hidden, cfg.train.seed);
        model.precond = precond;
        let trainer = Trainer::new(model.net.clone(), &cfg.train)?;
        Ok(FlowTrainer {
            model,
            trainer,
            cfg,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Continues training from an existing model with a fresh optimizer
    /// (used for fine-tuning).
    pub fn from_model(model: FlowModel, cfg: FlowTrainConfig) -> Result<Self, FlowError> {
        cfg.validate()?;
        let trainer = Trainer::new(model.net.clone(), &cfg.train)?;
        Ok(FlowTrainer {
            model,
            trainer,
            cfg,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut metadata = self.model.metadata();
        metadata["epoch"] = serde_json::json!(self.epoch);
        metadata["history"] = serde_json::to_value(&self.history).expect("serializable history");
        metadata["config"] = serde_json::to_value(&self.cfg).expect("serializable config");
        Checkpoint {
            metadata,
            nets: vec![("flow".into(), self.trainer.net.clone())],
            optimizers: vec![("flow".into(), self.trainer.opt.clone())],
            rng: Some(RngState::capture(&self.epoch_rng())),
            step: self.trainer.step,
        }
    }

    /// Restores a run written by [`FlowTrainer::checkpoint`]. The stored
    /// config is used so a resumed run continues the same schedule.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, FlowError> {
        let bad = |m: &str| FlowError::Nnet(NnetError::BadCheckpoint(m.into()));
        let model = FlowModel::from_checkpoint(ck)?;
        let cfg: FlowTrainConfig =
            serde_json::from_value(ck.metadata["config"].clone()).map_err(|_| bad("missing training config"))?;
        let history: Vec<EpochLosses> =
            serde_json::from_value(ck.metadata["history"].clone()).map_err(|_| bad("missing history"))?;
        let epoch = ck.metadata["epoch"].as_u64().ok_or_else(|| bad("missing epoch"))? as usize;
        let opt = ck.optimizer("flow").ok_or_else(|| bad("missing optimizer"))?.clone();
        if opt.m.len() != model.net.param_count() {
            return Err(bad("optimizer size does not match network"));
        }
        let trainer = Trainer {
            net: model.net.clone(),
            opt,
            schedule: cfg.train.schedule(),
            step: ck.step,
        };
        let out = FlowTrainer {
            model,
            trainer,
            cfg,
            epoch,
            history,
        };
        if let Some(state) = ck.rng {
            if state != RngState::capture(&out.epoch_rng()) {
                return Err(bad("rng state does not match epoch"));
            }
        }
        Ok(out)
    }

    /// RNG stream for the upcoming epoch; derived from (seed, epoch) so a run
    /// resumed at an epoch boundary draws identical batches.
    pub fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed);
        rng.set_stream(self.epoch as u64 + 1);
        rng
    }

    pub fn run_epoch(
        &mut self,
        skel: &Skeleton,
        train: &[FlowExample],
        val: &[FlowExample],
        prior: Option<&dyn MotionPrior>,
    ) -> Result<EpochLosses, FlowError> {
        let mode = match prior {
            Some(p) => PriorMode::Frozen(p),
            None => PriorMode::Off,
        };
        self.epoch_with(skel, train, val, mode)
    }

    /// Like [`FlowTrainer::run_epoch`], alternating one discriminator step
    /// after every generator step.
    pub fn run_epoch_adversarial(
        &mut self,
        skel: &Skeleton,
        train: &[FlowExample],
        val: &[FlowExample],
        prior: &mut dyn AdversarialPrior,
    ) -> Result<EpochLosses, FlowError> {
        self.epoch_with(skel, train, val, PriorMode::Adversarial(prior))
    }

    fn epoch_with(
        &mut self,
        skel: &Skeleton,
        train: &[FlowExample],
        val: &[FlowExample],
        mut prior: PriorMode,
    ) -> Result<EpochLosses, FlowError> {
        if train.is_empty() {
            return Err(FlowError::InvalidConfig("empty training set".into()));
        }
        let mut rng = self.epoch_rng();
        let dim = self.model.layout.dim();
        let bps_dim = self.cfg.condition.bps_dim;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = BatchTerms::default();
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.cfg.train.batch_size) {
            let items: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| {
                    let ex = &train[i];
                    let x0: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let tau = rng.gen_range(0.0..1.0);
                    let keep_bps = !rng.gen_bool(self.cfg.bps_dropout);
                    let keep_anchors = !rng.gen_bool(self.cfg.anchor_dropout);
                    let cond = ex
                        .cond
                        .with_blocks(keep_bps && ex.cond.use_bps, keep_anchors && ex.cond.use_anchors)
                        .features(bps_dim);
                    BatchItem { ex, x0, tau, cond }
                })
                .collect();
            // evaluate with the trainer's live weights without copying them
            std::mem::swap(&mut self.model.net, &mut self.trainer.net);
            let result = batch_gradient(&self.model, skel, &items, &self.cfg.weights, prior.frozen());
            std::mem::swap(&mut self.model.net, &mut self.trainer.net);
            let (loss, grads, terms, xhats) = result?;
            self.trainer.apply(loss, &grads)?;
            if let PriorMode::Adversarial(p) = &mut prior {
                let real: Vec<&[f64]> = items.iter().map(|it| it.ex.x1.as_slice()).collect();
                let fake: Vec<&[f64]> = xhats.iter().map(|x| x.as_slice()).collect();
                p.discriminator_step(&self.model.layout, &real, &fake)?;
            }
            total += loss;
            sums.flow += terms.flow;
            sums.smpl += terms.smpl;
            sums.foot += terms.foot;
            sums.prior += terms.prior;
            batches += 1;
        }
        self.model.net = self.trainer.net.clone();
        let nb = batches as f64;
        let val_flow = if val.is_empty() {
            None
        } else {
            Some(validation_flow_loss(
                &self.model,
                val,
                self.cfg.train.seed ^ VALIDATION_SEED_SALT,
            )?)
        };
        self.epoch += 1;
        let losses = EpochLosses {
            epoch: self.epoch,
            flow: sums.flow / nb,
            smpl: sums.smpl / nb,
            foot: sums.foot / nb,
            prior: sums.prior / nb,
            total: total / nb,
            val_flow,
        };
        log::info!(
            "flow epoch {}: total {:.4} flow {:.4} smpl {:.4} foot {:.6} prior {:.4}",
            losses.epoch,
            losses.total,
            losses.flow,
            losses.smpl,
            losses.foot,
            losses.prior
        );
        self.history.push(losses);
        Ok(losses)
    }

    /// Runs until `cfg.train.epochs` epochs are complete.
    pub fn run(
        &mut self,
        skel: &Skeleton,
        train: &[FlowExample],
        val: &[FlowExample],
        prior: Option<&dyn MotionPrior>,
    ) -> Result<(), FlowError> {
        while self.epoch < self.cfg.train.epochs {
            self.run_epoch(skel, train, val, prior)?;
        }
        Ok(())
    }
}

/// Trains a fresh, preconditioned model on `train` for `cfg.train.epochs`
/// epochs. The preconditioner is fitted to the training targets.
pub fn train_flow(
    skel: &Skeleton,
    train: &[FlowExample],
    val: &[FlowExample],
    cfg: &FlowTrainConfig,
    prior: Option<&dyn MotionPrior>,
) -> Result<FlowTrainer, FlowError> {
    let first = train
        .first()
        .ok_or_else(|| FlowError::InvalidConfig("empty training set".into()))?;
    let frames = first.cond.frames();
    if let Some(ex) = train.iter().chain(val).find(|ex| ex.cond.frames() != frames) {
        return Err(mismatch(frames, ex.cond.frames()));
    }
    let layout = FlowLayout::new(frames, skel.joint_count(), first.frame_rate);
    if let Some(ex) = train.iter().find(|ex| ex.x1.len() != layout.dim()) {
        return Err(mismatch(layout.dim(), ex.x1.len()));
    }
    let precond = Preconditioner::fit(&train.iter().map(|ex| ex.x1.as_slice()).collect::<Vec<_>>());
    let mut trainer = FlowTrainer::new(layout, cfg.clone(), Some(precond))?;
    trainer.run(skel, train, val, prior)?;
    Ok(trainer)
}

// ---------------------------------------------------------------------------
// Sampling

/// Step-wise modification of the sampler. Hooks run in chain order.
pub trait Guidance {
    fn name(&self) -> &str;

    /// Called before the velocity of step `step` (0-based, of `steps`) is
    /// evaluated; may replace the state.
    fn replace_state(&mut self, _step: usize, _steps: usize, _state: &mut FlowState) -> Result<(), String> {
        Ok(())
    }

    /// Adjusts the predicted velocity at `state`.
    fn adjust_velocity(&mut self, _step: usize, _state: &FlowState, _velocity: &mut [f64]) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Number of Euler steps K.
    pub steps: usize,
    /// Contact guidance weight γ_guid; 0 disables the hook.
    pub contact_weight: f64,
    /// Prior guidance weight η; 0 disables the hook.
    pub prior_weight: f64,
    /// Physics refinement before the last Euler step.
    pub simulation: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 10,
            contact_weight: 0.1,
            prior_weight: 0.05,
            simulation: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.steps == 0 {
            return Err(FlowError::InvalidConfig("K must be at least 1".into()));
        }
        if !(self.contact_weight >= 0.0 && self.prior_weight >= 0.0) {
            return Err(FlowError::InvalidConfig("guidance weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Standard normal start point for `seed`.
pub fn initial_noise(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// K-step Euler integration from seeded noise, returning the final state.
pub fn sample_state(
    model: &FlowModel,
    cond: &Condition,
    seed: u64,
    steps: usize,
    hooks: &mut [&mut dyn Guidance],
) -> Result<FlowState, FlowError> {
    if steps == 0 {
        return Err(FlowError::InvalidConfig("K must be at least 1".into()));
    }
    model.check_condition(cond)?;
    let features = cond.features(model.condition.bps_dim);
    let mut state = FlowState {
        x: initial_noise(model.layout.dim(), seed),
        tau: 0.0,
    };
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        state.tau = k as f64 * dt;
        for hook in hooks.iter_mut() {
            hook.replace_state(k, steps, &mut state).map_err(|message| FlowError::Hook {
                hook: hook.name().to_string(),
                step: k,
                message,
            })?;
        }
        if state.x.len() != model.layout.dim() {
            return Err(mismatch(model.layout.dim(), state.x.len()));
        }
        let mut v = model.velocity(&state.x, state.tau, &features)?;
        for hook in hooks.iter_mut() {
            hook.adjust_velocity(k, &state, &mut v).map_err(|message| FlowError::Hook {
                hook: hook.name().to_string(),
                step: k,
                message,
            })?;
        }
        for (x, v) in state.x.iter_mut().zip(&v) {
            *x += dt * v;
        }
    }
    state.tau = 1.0;
    Ok(state)
}

pub fn sample(
    model: &FlowModel,
    cond: &Condition,
    seed: u64,
    steps: usize,
    hooks: &mut [&mut dyn Guidance],
) -> Result<MotionSequence, FlowError> {
    let state = sample_state(model, cond, seed, steps, hooks)?;
    decode(&model.layout, &state.x)
}

// ---------------------------------------------------------------------------
// Motion files

const MOTION_MAGIC: &[u8; 4] = b"CMFM";
const MOTION_VERSION: u16 = 1;

pub fn motion_to_bytes(seq: &MotionSequence) -> Vec<u8> {
    let joints = seq.frames.first().map_or(0, |f| f[0].theta.len());
    let mut w = Vec::new();
    w.extend_from_slice(MOTION_MAGIC);
    w.write_u16::<LittleEndian>(MOTION_VERSION).unwrap();
    w.write_u32::<LittleEndian>(seq.len() as u32).unwrap();
    w.write_u32::<LittleEndian>(joints as u32).unwrap();
    w.write_f64::<LittleEndian>(seq.frame_rate).unwrap();
    for frame in &seq.frames {
        for pose in frame {
            for r in &pose.theta {
                for v in r.0 {
                    w.write_f64::<LittleEndian>(v).unwrap();
                }
            }
            for v in pose.gamma.iter().chain(pose.beta.iter()) {
                w.write_f64::<LittleEndian>(*v).unwrap();
            }
        }
    }
    let digest = Sha256::digest(&w);
    w.extend_from_slice(&digest);
    w
}

pub fn motion_from_bytes(bytes: &[u8]) -> Result<MotionSequence, FlowError> {
    let bad = |m: &str| FlowError::BadFormat(m.into());
    if bytes.len() < 4 + 2 + 4 + 4 + 8 + 32 || &bytes[..4] != MOTION_MAGIC {
        return Err(bad("not a motion file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut r = &body[4..];
    let version = r.read_u16::<LittleEndian>().map_err(|_| bad("truncated"))?;
    if version != MOTION_VERSION {
        return Err(bad("unsupported version"));
    }
    let frames = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
    let joints = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
    let frame_rate = r.read_f64::<LittleEndian>().map_err(|_| bad("truncated"))?;
    let per_agent = joints * 6 + 3 + SHAPE_DIM;
    if r.len() != frames * 2 * per_agent * 8 {
        return Err(bad("payload size does not match header"));
    }
    let mut next = || -> f64 { r.read_f64::<LittleEndian>().unwrap() };
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut read_agent = || AgentPose {
            theta: (0..joints).map(|_| Rot6D(std::array::from_fn(|_| next()))).collect(),
            gamma: Vector3::from(std::array::from_fn::<f64, 3, _>(|_| next())),
            beta: std::array::from_fn(|_| next()),
        };
        let a0 = read_agent();
        let a1 = read_agent();
        out.push([a0, a1]);
    }
    Ok(MotionSequence {
        frames: out,
        frame_rate,
    })
}

pub fn write_motion(seq: &MotionSequence, path: &Path) -> Result<(), FlowError> {
    std::fs::write(path, motion_to_bytes(seq)).map_err(|e| FlowError::Io(format!("{}: {e}", path.display())))
}

pub fn read_motion(path: &Path) -> Result<MotionSequence, FlowError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| FlowError::Io(format!("{}: {e}", path.display())))?;
    motion_from_bytes(&bytes)
}

/// Joint positions as CSV rows `frame,agent,joint,x,y,z`.
pub fn motion_to_csv(seq: &MotionSequence, skel: &Skeleton) -> Result<String, FlowError> {
    let mut out = String::from("frame,agent,joint,x,y,z\n");
    let positions = seq
        .joint_positions(skel)
        .map_err(|e| FlowError::BadFormat(e.to_string()))?;
    for (t, frame) in positions.iter().enumerate() {
        for (a, joints) in frame.iter().enumerate() {
            for (j, p) in joints.iter().enumerate() {
                out.push_str(&format!("{t},{a},{},{},{},{}\n", skel.joints[j].name, p.x, p.y, p.z));
            }
        }
    }
    Ok(out)
}

/// Maps a motion generated in the canonical frame of `traj` back to world
/// coordinates.
pub fn to_world(seq: &MotionSequence, traj: &ObjectTrajectory) -> MotionSequence {
    transform_motion(seq, &canonical_frame(traj).inverse())
}
