//! Procedural ground-truth episodes: two agents carrying an object along a
//! scripted path, with contact annotations, foot-contact masks and
//! affordance labels.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{
    sample_surface, ObjectSpec, ObjectTrajectory, Part, Pose, Primitive, SurfacePoint,
};
use crate::kinematics::{axis_angle, na_to_mat3, AgentPose, MotionSequence, Rot6D, Skeleton, SHAPE_DIM};

pub const DEFAULT_FRAMES: usize = 64;
pub const DEFAULT_FRAME_RATE: f64 = 20.0;
/// Surface samples standing in for mesh vertices.
pub const VERTEX_COUNT: usize = 512;
pub const VERTEX_SEED: u64 = 0;
pub const AFFORDANCE_DECAY: f64 = 0.1;
pub const FOOT_SPEED_THRESHOLD: f64 = 0.05;
pub const FOOT_HEIGHT_THRESHOLD: f64 = 0.08;
const IK_LAMBDA: f64 = 0.05;
const IK_ITERS: usize = 200;
const IK_FAIL_RESIDUAL: f64 = 0.03;
const MAX_ATTEMPTS: u32 = 16;
const STANDOFF: f64 = 0.22;
const CORPUS_MAGIC: &[u8; 4] = b"CMFC";
const CORPUS_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("ik failure: wrist residual {residual:.4} m")]
    IkFailure { residual: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("corpus version {found}, expected {expected}")]
    FormatVersionMismatch { found: u16, expected: u16 },
    #[error("checksum mismatch in episode {episode}")]
    ChecksumMismatch { episode: usize },
    #[error("bad corpus: {0}")]
    BadFormat(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectFamily {
    Box,
    Cylinder,
    Composite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathFamily {
    Stationary,
    Line,
    Arc,
    LiftTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeParams {
    pub frames: usize,
    pub frame_rate: f64,
    /// Random when unset.
    pub object: Option<ObjectFamily>,
    /// Random among line/arc/lift-turn when unset.
    pub path: Option<PathFamily>,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        EpisodeParams {
            frames: DEFAULT_FRAMES,
            frame_rate: DEFAULT_FRAME_RATE,
            object: None,
            path: None,
        }
    }
}

/// One hand's contact annotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactAnchor {
    pub p: Vector3<f64>,
    pub n: Vector3<f64>,
    /// Body-frame offset from the nearest surface vertex.
    pub delta: Vector3<f64>,
    pub s: bool,
}

/// Anchors indexed `[agent][hand]`, hand 0 = left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactFrame {
    pub anchors: [[ContactAnchor; 2]; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceField {
    pub points: Vec<Vector3<f64>>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub attempt: u32,
    pub object_family: ObjectFamily,
    pub path_family: PathFamily,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub motion: MotionSequence,
    pub object: ObjectSpec,
    pub trajectory: ObjectTrajectory,
    pub contacts: Vec<ContactFrame>,
    /// `[agent][foot joint]` per frame, foot joints as in the skeleton.
    pub foot_mask: Vec<[Vec<bool>; 2]>,
    pub affordance_gt: AffordanceField,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.motion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motion.is_empty()
    }
}

/// The fixed vertex sample used for contact offsets and affordance points.
pub fn object_vertices(obj: &ObjectSpec) -> Vec<SurfacePoint> {
    sample_surface(obj, VERTEX_COUNT, VERTEX_SEED)
}

/// Body-frame offset of `p_body` from its nearest vertex.
pub fn vertex_offset(vertices: &[SurfacePoint], p_body: &Vector3<f64>) -> Vector3<f64> {
    let nearest = vertices
        .iter()
        .min_by(|a, b| {
            (a.point - p_body)
                .norm_squared()
                .total_cmp(&(b.point - p_body).norm_squared())
        })
        .expect("non-empty vertex set");
    p_body - nearest.point
}

/// `exp(-d / 0.1)` with `d` the distance to the nearest grasp site.
pub fn affordance_labels(points: &[Vector3<f64>], sites: &[Vector3<f64>]) -> Vec<f64> {
    points
        .iter()
        .map(|q| {
            let d = sites.iter().map(|s| (q - s).norm()).fold(f64::INFINITY, f64::min);
            if d.is_finite() {
                (-d / AFFORDANCE_DECAY).exp()
            } else {
                0.0
            }
        })
        .collect()
}

/// Binary foot contact from joint speed and height.
pub fn foot_contact_mask(joints: &[Vec<Vector3<f64>>], foot_joints: &[usize], frame_rate: f64) -> Vec<Vec<bool>> {
    let t_len = joints.len();
    (0..t_len)
        .map(|t| {
            foot_joints
                .iter()
                .map(|&j| {
                    // forward difference, so a set bit means the foot stays put until t + 1
                    let speed = if t_len < 2 {
                        0.0
                    } else if t + 1 < t_len {
                        (joints[t + 1][j] - joints[t][j]).norm() * frame_rate
                    } else {
                        (joints[t][j] - joints[t - 1][j]).norm() * frame_rate
                    };
                    speed < FOOT_SPEED_THRESHOLD && joints[t][j].z < FOOT_HEIGHT_THRESHOLD
                })
                .collect()
        })
        .collect()
}

fn min_jerk(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    axis_angle(Vector3::z(), a)
}

/// Body-frame grasp site with outward normal, indexed `[side][hand]`
/// where side 0 is the +x face.
type Sites = [[(Vector3<f64>, Vector3<f64>); 2]; 2];

fn make_object(family: ObjectFamily, rng: &mut ChaCha8Rng) -> (ObjectSpec, Sites, f64) {
    let mass = rng.gen_range(5.0..20.0);
    let sites_on_plane = |x: f64, w: f64| -> Sites {
        let mut s = [[(Vector3::zeros(), Vector3::zeros()); 2]; 2];
        for (side, sigma) in [(0usize, 1.0), (1, -1.0)] {
            // the agent facing this face has its left hand on the -sigma y side
            for (hand, lateral) in [(0usize, -sigma), (1, sigma)] {
                s[side][hand] = (Vector3::new(sigma * x, lateral * w, 0.0), Vector3::new(sigma, 0.0, 0.0));
            }
        }
        s
    };
    match family {
        ObjectFamily::Box => {
            let h = [rng.gen_range(0.15..0.3), rng.gen_range(0.15..0.3), rng.gen_range(0.1..0.25)];
            let obj = ObjectSpec::uniform(Primitive::Box { half_extents: h }, mass).unwrap();
            let w = (h[1] - 0.03).min(0.15);
            (obj, sites_on_plane(h[0], w), h[0])
        }
        ObjectFamily::Cylinder => {
            let r: f64 = rng.gen_range(0.15..0.25);
            let hh = rng.gen_range(0.1..0.25);
            let obj = ObjectSpec::uniform(Primitive::Cylinder { radius: r, half_height: hh }, mass).unwrap();
            let w = (0.7 * r).min(0.12);
            let phi = (w / r).asin();
            let mut s = sites_on_plane(r, w);
            for (side, sigma) in [(0usize, 1.0), (1, -1.0)] {
                for (hand, lateral) in [(0usize, -sigma), (1, sigma)] {
                    let n = Vector3::new(sigma * phi.cos(), lateral * phi.sin(), 0.0);
                    s[side][hand] = (n * r, n);
                }
            }
            (obj, s, r)
        }
        ObjectFamily::Composite => {
            let h: [f64; 3] = [rng.gen_range(0.15..0.3), rng.gen_range(0.18..0.3), rng.gen_range(0.1..0.2)];
            let handle_r = 0.025;
            let handle_half: f64 = (h[1] - 0.02).min(0.16);
            let along_y = na_to_mat3(&axis_angle(Vector3::x(), PI / 2.0));
            let identity = na_to_mat3(&Matrix3::identity());
            let cx = h[0] + handle_r - 0.01;
            let parts = vec![
                Part { rotation: identity, translation: [0.0; 3], shape: Primitive::Box { half_extents: h } },
                Part {
                    rotation: along_y,
                    translation: [cx, 0.0, 0.0],
                    shape: Primitive::Cylinder { radius: handle_r, half_height: handle_half },
                },
                Part {
                    rotation: along_y,
                    translation: [-cx, 0.0, 0.0],
                    shape: Primitive::Cylinder { radius: handle_r, half_height: handle_half },
                },
            ];
            let obj = ObjectSpec::uniform(Primitive::Composite { parts }, mass).unwrap();
            let w = (handle_half - 0.03).min(0.13);
            (obj, sites_on_plane(cx + handle_r, w), cx + handle_r)
        }
    }
}

/// Object center and yaw per frame.
fn make_path(
    family: PathFamily,
    frames: usize,
    hold_height: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vector3<f64>>, Vec<f64>) {
    let c0 = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), hold_height);
    let yaw0 = rng.gen_range(-PI..PI);
    let t0 = 0.1 * (frames - 1) as f64;
    let t1 = 0.9 * (frames - 1) as f64;
    let s: Vec<f64> = (0..frames).map(|t| min_jerk((t as f64 - t0) / (t1 - t0))).collect();
    match family {
        PathFamily::Stationary => (vec![c0; frames], vec![yaw0; frames]),
        PathFamily::Line => {
            let dir = rng.gen_range(-PI..PI);
            let dist = rng.gen_range(0.3..0.7);
            let d = Vector3::new(dir.cos(), dir.sin(), 0.0) * dist;
            (s.iter().map(|u| c0 + d * *u).collect(), vec![yaw0; frames])
        }
        PathFamily::Arc => {
            let radius = rng.gen_range(1.0..2.0);
            let length = rng.gen_range(0.3..0.7);
            let sweep: f64 = length / radius * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let heading = rng.gen_range(-PI..PI);
            // circle center to the left (sweep > 0) or right of the heading
            let normal = Vector3::new(-heading.sin(), heading.cos(), 0.0) * sweep.signum();
            let center = c0 + normal * radius;
            let start = c0 - center;
            let centers = s
                .iter()
                .map(|u| center + rot_z(sweep * u) * start)
                .collect();
            (centers, s.iter().map(|u| yaw0 + sweep * u).collect())
        }
        PathFamily::LiftTurn => {
            let lift = rng.gen_range(0.1..0.2);
            let turn = rng.gen_range(0.4..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (
                s.iter().map(|u| c0 + Vector3::z() * (lift * u)).collect(),
                s.iter().map(|u| yaw0 + turn * u).collect(),
            )
        }
    }
}

/// Forward kinematics over plain local rotation matrices.
fn fk_mats(
    skel: &Skeleton,
    offsets: &[Vector3<f64>],
    local: &[Matrix3<f64>],
    root: &Vector3<f64>,
) -> (Vec<Vector3<f64>>, Vec<Matrix3<f64>>) {
    let n = skel.joint_count();
    let mut pos = Vec::with_capacity(n);
    let mut world = Vec::with_capacity(n);
    pos.push(*root);
    world.push(local[0]);
    for j in 1..n {
        let p = skel.parent(j).unwrap();
        pos.push(pos[p] + world[p] * offsets[j]);
        world.push(world[p] * local[j]);
    }
    (pos, world)
}

/// Ball joint followed by a hinge, driving `end` toward a target.
struct Chain {
    ball: usize,
    hinge: usize,
    axis: Vector3<f64>,
    limits: (f64, f64),
    end: usize,
}

/// Damped least squares on (ball, hinge). Returns the final residual.
fn solve_chain(
    skel: &Skeleton,
    offsets: &[Vector3<f64>],
    local: &mut [Matrix3<f64>],
    hinge_angle: &mut f64,
    root: &Vector3<f64>,
    chain: &Chain,
    target: &Vector3<f64>,
) -> f64 {
    local[chain.hinge] = axis_angle(chain.axis, *hinge_angle);
    for _ in 0..IK_ITERS {
        let (pos, world) = fk_mats(skel, offsets, local, root);
        let e = target - pos[chain.end];
        if e.norm() < 1e-7 {
            break;
        }
        let lever_ball = pos[chain.end] - pos[chain.ball];
        let lever_hinge = pos[chain.end] - pos[chain.hinge];
        let a_world = world[chain.hinge] * chain.axis;
        let cols = [
            Vector3::x().cross(&lever_ball),
            Vector3::y().cross(&lever_ball),
            Vector3::z().cross(&lever_ball),
            a_world.cross(&lever_hinge),
        ];
        let mut jjt = Matrix3::identity() * (IK_LAMBDA * IK_LAMBDA);
        for c in &cols {
            jjt += c * c.transpose();
        }
        let y = jjt.lu().solve(&e).unwrap_or_else(Vector3::zeros);
        let mut dq = [0.0; 4];
        for (k, c) in cols.iter().enumerate() {
            dq[k] = c.dot(&y);
        }
        let mut omega = Vector3::new(dq[0], dq[1], dq[2]);
        if omega.norm() > 0.5 {
            omega *= 0.5 / omega.norm();
        }
        let parent_world = world[skel.parent(chain.ball).unwrap()];
        let inc = axis_angle(omega, omega.norm());
        local[chain.ball] = parent_world.transpose() * inc * parent_world * local[chain.ball];
        *hinge_angle = (*hinge_angle + dq[3].clamp(-0.5, 0.5)).clamp(chain.limits.0, chain.limits.1);
        local[chain.hinge] = axis_angle(chain.axis, *hinge_angle);
    }
    let (pos, _) = fk_mats(skel, offsets, local, root);
    (target - pos[chain.end]).norm()
}

#[derive(Clone, Copy)]
struct Foot {
    planted: Vector3<f64>,
    yaw: f64,
    swing: Option<(usize, Vector3<f64>, Vector3<f64>, f64, f64)>,
}

/// Ankle targets and foot yaws per frame, from alternating footsteps.
fn plan_footsteps(
    roots: &[Vector3<f64>],
    yaws: &[f64],
    hip_lateral: [f64; 2],
    ankle_height: [f64; 2],
    frame_rate: f64,
) -> Vec<[(Vector3<f64>, f64); 2]> {
    let frames = roots.len();
    let swing_frames = ((0.3 * frame_rate).round() as usize).max(3);
    let home = |t: usize, f: usize| -> Vector3<f64> {
        let t = t.min(frames - 1);
        let lateral = rot_z(yaws[t]) * Vector3::new(0.0, hip_lateral[f], 0.0);
        Vector3::new(roots[t].x + lateral.x, roots[t].y + lateral.y, ankle_height[f])
    };
    let mut feet = [0, 1].map(|f| Foot {
        planted: home(0, f),
        yaw: yaws[0],
        swing: None,
    });
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        if feet.iter().all(|f| f.swing.is_none()) && t + 1 < frames {
            let look = (t + swing_frames).min(frames - 1);
            let errs = [0, 1].map(|f| {
                (home(look, f) - feet[f].planted).norm() + (yaws[look] - feet[f].yaw).abs() * 0.2
            });
            let f = if errs[0] >= errs[1] { 0 } else { 1 };
            if errs[f] > 0.05 {
                feet[f].swing = Some((t, feet[f].planted, home(look, f), feet[f].yaw, yaws[look]));
            }
        }
        let mut frame = [(Vector3::zeros(), 0.0); 2];
        for (f, foot) in feet.iter_mut().enumerate() {
            if let Some((start, from, to, yaw_from, yaw_to)) = foot.swing {
                let u = (t - start) as f64 / swing_frames as f64;
                let k = min_jerk(u);
                let mut p = from + (to - from) * k;
                p.z += 0.06 * (PI * u.min(1.0)).sin();
                frame[f] = (p, yaw_from + (yaw_to - yaw_from) * k);
                if t - start >= swing_frames {
                    foot.planted = to;
                    foot.yaw = yaw_to;
                    foot.swing = None;
                }
            } else {
                frame[f] = (foot.planted, foot.yaw);
            }
        }
        out.push(frame);
    }
    out
}

/// Pelvis height with the toes of the shorter leg 1 cm above the ground and
/// both knees slightly bent.
fn pelvis_height(skel: &Skeleton, offsets: &[Vector3<f64>]) -> f64 {
    ["l_toe", "r_toe"]
        .iter()
        .map(|name| {
            let j = skel.joint_index(name).expect("default skeleton joint");
            let mut drop = 0.0;
            let mut k = j;
            while let Some(p) = skel.parent(k) {
                drop -= offsets[k].z;
                k = p;
            }
            drop
        })
        .fold(f64::INFINITY, f64::min)
        + 0.01
        - 0.03
}

fn hanging_arm(local: &mut [Matrix3<f64>], shoulder: usize, elbow: usize, left: bool) {
    let s = if left { -1.0 } else { 1.0 };
    local[shoulder] = axis_angle(Vector3::x(), s * 1.45);
    local[elbow] = axis_angle(Vector3::z(), -s * 0.15);
}

fn sample_beta(rng: &mut ChaCha8Rng) -> [f64; SHAPE_DIM] {
    let normal = Normal::new(0.0, 0.1).unwrap();
    let mut b = [0.0; SHAPE_DIM];
    b.iter_mut().for_each(|v| *v = normal.sample(rng));
    b
}

fn mix_seed(seed: u64, attempt: u32) -> u64 {
    seed ^ (attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generates one episode, rejecting and reseeding on IK failure.
pub fn generate_episode(seed: u64, params: &EpisodeParams) -> Result<Episode, SynthError> {
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        match try_generate_episode(seed, attempt, params) {
            Ok(ep) => return Ok(ep),
            Err(e @ SynthError::IkFailure { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap())
}

/// A single generation attempt.
pub fn try_generate_episode(seed: u64, attempt: u32, params: &EpisodeParams) -> Result<Episode, SynthError> {
    if params.frames < 16 {
        return Err(SynthError::InvalidParams(format!("need at least 16 frames, got {}", params.frames)));
    }
    if !(params.frame_rate > 0.0) {
        return Err(SynthError::InvalidParams("frame_rate must be positive".into()));
    }
    let frames = params.frames;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, attempt));
    let object_family = params.object.unwrap_or_else(|| {
        [ObjectFamily::Box, ObjectFamily::Cylinder, ObjectFamily::Composite][rng.gen_range(0..3)]
    });
    let path_family = params
        .path
        .unwrap_or_else(|| [PathFamily::Line, PathFamily::Arc, PathFamily::LiftTurn][rng.gen_range(0..3)]);
    let (object, sites, face_x) = make_object(object_family, &mut rng);
    let skel = Skeleton::default_21();
    let betas = [sample_beta(&mut rng), sample_beta(&mut rng)];
    // as high as the shortest reach requires to cover a 0.33 m horizontal offset
    let required_hold = |beta: &[f64; SHAPE_DIM], side: &str| {
        let o = skel.apply_shape(beta);
        let joint = |n: &str| skel.joint_index(&format!("{side}_{n}")).unwrap();
        let mut j = joint("shoulder");
        let mut z = pelvis_height(&skel, &o);
        while let Some(p) = skel.parent(j) {
            z += o[j].z;
            j = p;
        }
        let reach = 0.9 * (o[joint("elbow")].norm() + o[joint("wrist")].norm());
        z - (reach * reach - 0.33 * 0.33).max(0.0).sqrt()
    };
    let hold = betas
        .iter()
        .flat_map(|b| ["l", "r"].map(|side| required_hold(b, side)))
        .fold(f64::NEG_INFINITY, f64::max)
        + rng.gen_range(0.0..0.03);
    let (centers, yaws) = make_path(path_family, frames, hold, &mut rng);
    let poses: Vec<Pose> = centers
        .iter()
        .zip(&yaws)
        .map(|(c, y)| Pose::new(rot_z(*y), *c))
        .collect();

    // grasp mode: both hands, or a single random hand
    let mut valid = [[true; 2]; 2];
    for v in valid.iter_mut() {
        if rng.gen_bool(0.2) {
            v[rng.gen_range(0..2)] = false;
        }
    }

    let n_joints = skel.joint_count();
    let wrist_radius = skel.joints[skel.wrist_joints[0]].radius;
    let idx = |name: &str| skel.joint_index(name).expect("default skeleton joint");
    let arms = [
        Chain { ball: idx("l_shoulder"), hinge: idx("l_elbow"), axis: -Vector3::z(), limits: (0.0, 2.5), end: idx("l_wrist") },
        Chain { ball: idx("r_shoulder"), hinge: idx("r_elbow"), axis: Vector3::z(), limits: (0.0, 2.5), end: idx("r_wrist") },
    ];
    let legs = [
        Chain { ball: idx("l_hip"), hinge: idx("l_knee"), axis: Vector3::y(), limits: (0.0, 2.4), end: idx("l_ankle") },
        Chain { ball: idx("r_hip"), hinge: idx("r_knee"), axis: Vector3::y(), limits: (0.0, 2.4), end: idx("r_ankle") },
    ];
    let ankles = [idx("l_ankle"), idx("r_ankle")];
    let toes = [idx("l_toe"), idx("r_toe")];

    let mut agent_frames: [Vec<AgentPose>; 2] = [Vec::with_capacity(frames), Vec::with_capacity(frames)];
    let mut joints: [Vec<Vec<Vector3<f64>>>; 2] = [Vec::new(), Vec::new()];
    let mut worst = 0.0f64;
    for agent in 0..2 {
        let sigma = if agent == 0 { 1.0 } else { -1.0 };
        let beta = betas[agent];
        let offsets = skel.apply_shape(&beta);
        let ankle_height = [0, 1].map(|f| 0.01 - offsets[toes[f]].z);
        let pelvis_z = pelvis_height(&skel, &offsets);
        let yaw_rel = if agent == 0 { PI } else { 0.0 };
        let roots: Vec<Vector3<f64>> = (0..frames)
            .map(|t| {
                let side = poses[t].rotation * Vector3::new(sigma * (face_x + STANDOFF), 0.0, 0.0);
                Vector3::new(centers[t].x + side.x, centers[t].y + side.y, pelvis_z)
            })
            .collect();
        let agent_yaws: Vec<f64> = yaws.iter().map(|y| y + yaw_rel).collect();
        let hip_lateral = [offsets[legs[0].ball].y, offsets[legs[1].ball].y];
        let steps = plan_footsteps(&roots, &agent_yaws, hip_lateral, ankle_height, params.frame_rate);

        let mut local = vec![Matrix3::identity(); n_joints];
        // seeds: arms forward and down, knees slightly bent
        let arm_seed = [
            rot_z(-0.6) * axis_angle(Vector3::x(), -1.0),
            rot_z(0.6) * axis_angle(Vector3::x(), 1.0),
        ];
        local[arms[0].ball] = arm_seed[0];
        local[arms[1].ball] = arm_seed[1];
        let mut elbow = [0.6, 0.6];
        let mut knee = [0.3, 0.3];
        for (hand, arm) in arms.iter().enumerate() {
            if !valid[agent][hand] {
                hanging_arm(&mut local, arm.ball, arm.hinge, hand == 0);
            }
        }
        for t in 0..frames {
            local[0] = rot_z(agent_yaws[t]);
            for (f, leg) in legs.iter().enumerate() {
                solve_chain(&skel, &offsets, &mut local, &mut knee[f], &roots[t], leg, &steps[t][f].0);
                let (_, world) = fk_mats(&skel, &offsets, &local, &roots[t]);
                let parent = world[skel.parent(ankles[f]).unwrap()];
                local[ankles[f]] = parent.transpose() * rot_z(steps[t][f].1);
            }
            for (hand, arm) in arms.iter().enumerate() {
                if !valid[agent][hand] {
                    continue;
                }
                let (site, normal) = sites[agent][hand];
                let target = poses[t].to_world(&(site + normal * wrist_radius));
                let mut r = solve_chain(&skel, &offsets, &mut local, &mut elbow[hand], &roots[t], arm, &target);
                if r > 1e-4 {
                    // warm start stuck: restart from the seed posture and keep the better result
                    let mut fresh = local.clone();
                    fresh[arm.ball] = arm_seed[hand];
                    let mut fresh_elbow = 0.6;
                    let r2 = solve_chain(&skel, &offsets, &mut fresh, &mut fresh_elbow, &roots[t], arm, &target);
                    if r2 < r {
                        local = fresh;
                        elbow[hand] = fresh_elbow;
                        r = r2;
                    }
                }
                worst = worst.max(r);
            }
            if worst > IK_FAIL_RESIDUAL {
                return Err(SynthError::IkFailure { residual: worst });
            }
            let (pos, _) = fk_mats(&skel, &offsets, &local, &roots[t]);
            joints[agent].push(pos);
            agent_frames[agent].push(AgentPose {
                theta: local.iter().map(Rot6D::from_matrix).collect(),
                beta,
                gamma: roots[t],
            });
        }
    }

    let vertices = object_vertices(&object);
    let contacts: Vec<ContactFrame> = (0..frames)
        .map(|t| {
            let mut anchors = [[ContactAnchor {
                p: Vector3::zeros(),
                n: Vector3::z(),
                delta: Vector3::zeros(),
                s: false,
            }; 2]; 2];
            for agent in 0..2 {
                for hand in 0..2 {
                    let (p_body, n_body) = if valid[agent][hand] {
                        sites[agent][hand]
                    } else {
                        let wrist = joints[agent][t][skel.wrist_joints[hand]];
                        let q = object.project_to_surface(&Pose::identity(), &poses[t].to_body(&wrist));
                        (q, object.sdf_gradient(&Pose::identity(), &q))
                    };
                    anchors[agent][hand] = ContactAnchor {
                        p: poses[t].to_world(&p_body),
                        n: poses[t].rotation * n_body,
                        delta: vertex_offset(&vertices, &p_body),
                        s: valid[agent][hand],
                    };
                }
            }
            ContactFrame { anchors }
        })
        .collect();

    let masks = [0, 1].map(|a| foot_contact_mask(&joints[a], &skel.foot_joints, params.frame_rate));
    let foot_mask = (0..frames).map(|t| [masks[0][t].clone(), masks[1][t].clone()]).collect();

    let grasp_sites: Vec<Vector3<f64>> = (0..2)
        .flat_map(|a| (0..2).map(move |h| (a, h)))
        .filter(|&(a, h)| valid[a][h])
        .map(|(a, h)| sites[a][h].0)
        .collect();
    let points: Vec<Vector3<f64>> = vertices.iter().map(|v| v.point).collect();
    let alpha = affordance_labels(&points, &grasp_sites);

    let [a0, a1] = agent_frames;
    let motion = MotionSequence {
        frames: a0.into_iter().zip(a1).map(|(x, y)| [x, y]).collect(),
        frame_rate: params.frame_rate,
    };
    Ok(Episode {
        motion,
        object,
        trajectory: ObjectTrajectory {
            poses,
            frame_rate: params.frame_rate,
        },
        contacts,
        foot_mask,
        affordance_gt: AffordanceField { points, alpha },
        meta: EpisodeMeta {
            seed,
            attempt,
            object_family,
            path_family,
        },
    })
}

/// Episodes for seeds `base_seed..base_seed + count`, generated in parallel.
pub fn generate_corpus(count: usize, base_seed: u64, params: &EpisodeParams) -> Result<Vec<Episode>, SynthError> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|k| generate_episode(base_seed + k, params))
        .collect()
}

// ---------------------------------------------------------------------------
// binary encoding

struct Writer(Vec<u8>);

impl Writer {
    fn f(&mut self, x: f64) {
        self.0.write_f64::<LittleEndian>(x).unwrap();
    }
    fn v(&mut self, x: &Vector3<f64>) {
        x.iter().for_each(|c| self.f(*c));
    }
    fn m(&mut self, x: &Matrix3<f64>) {
        for i in 0..3 {
            for j in 0..3 {
                self.f(x[(i, j)]);
            }
        }
    }
    fn u32(&mut self, x: usize) {
        self.0.write_u32::<LittleEndian>(x as u32).unwrap();
    }
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
}

struct Reader<'a>(&'a [u8]);

fn truncated() -> SynthError {
    SynthError::BadFormat("truncated episode".into())
}

impl Reader<'_> {
    fn f(&mut self) -> Result<f64, SynthError> {
        self.0.read_f64::<LittleEndian>().map_err(|_| truncated())
    }
    fn v(&mut self) -> Result<Vector3<f64>, SynthError> {
        Ok(Vector3::new(self.f()?, self.f()?, self.f()?))
    }
    fn m(&mut self) -> Result<Matrix3<f64>, SynthError> {
        let mut m = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = self.f()?;
            }
        }
        Ok(m)
    }
    fn u32(&mut self) -> Result<usize, SynthError> {
        let n = self.0.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
        if n > self.0.len() + 1 {
            return Err(SynthError::BadFormat("length exceeds data".into()));
        }
        Ok(n)
    }
    fn u8(&mut self) -> Result<u8, SynthError> {
        self.0.read_u8().map_err(|_| truncated())
    }
}

fn write_primitive(w: &mut Writer, p: &Primitive) {
    match p {
        Primitive::Box { half_extents } => {
            w.u8(0);
            half_extents.iter().for_each(|h| w.f(*h));
        }
        Primitive::Cylinder { radius, half_height } => {
            w.u8(1);
            w.f(*radius);
            w.f(*half_height);
        }
        Primitive::Composite { parts } => {
            w.u8(2);
            w.u32(parts.len());
            for part in parts {
                part.rotation.iter().flatten().for_each(|x| w.f(*x));
                part.translation.iter().for_each(|x| w.f(*x));
                write_primitive(w, &part.shape);
            }
        }
    }
}

fn read_primitive(r: &mut Reader, depth: usize) -> Result<Primitive, SynthError> {
    Ok(match r.u8()? {
        0 => Primitive::Box { half_extents: [r.f()?, r.f()?, r.f()?] },
        1 => Primitive::Cylinder { radius: r.f()?, half_height: r.f()? },
        2 if depth == 0 => {
            let n = r.u32()?;
            let mut parts = Vec::with_capacity(n);
            for _ in 0..n {
                let mut rotation = [[0.0; 3]; 3];
                for row in rotation.iter_mut() {
                    for x in row.iter_mut() {
                        *x = r.f()?;
                    }
                }
                let translation = [r.f()?, r.f()?, r.f()?];
                parts.push(Part { rotation, translation, shape: read_primitive(r, depth + 1)? });
            }
            Primitive::Composite { parts }
        }
        tag => return Err(SynthError::BadFormat(format!("bad primitive tag {tag}"))),
    })
}

fn family_tags(meta: &EpisodeMeta) -> (u8, u8) {
    let o = match meta.object_family {
        ObjectFamily::Box => 0,
        ObjectFamily::Cylinder => 1,
        ObjectFamily::Composite => 2,
    };
    let p = match meta.path_family {
        PathFamily::Stationary => 0,
        PathFamily::Line => 1,
        PathFamily::Arc => 2,
        PathFamily::LiftTurn => 3,
    };
    (o, p)
}

impl Episode {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        let t_len = self.len();
        w.u32(t_len);
        w.f(self.motion.frame_rate);
        let n_joints = self.motion.frames.first().map_or(0, |f| f[0].theta.len());
        w.u32(n_joints);
        for frame in &self.motion.frames {
            for pose in frame {
                pose.theta.iter().flat_map(|r| r.0).for_each(|x| w.f(x));
                pose.beta.iter().for_each(|x| w.f(*x));
                w.v(&pose.gamma);
            }
        }
        write_primitive(&mut w, &self.object.primitive);
        w.f(self.object.mass);
        self.object.inertia.iter().flatten().for_each(|x| w.f(*x));
        w.f(self.trajectory.frame_rate);
        for pose in &self.trajectory.poses {
            w.m(&pose.rotation);
            w.v(&pose.translation);
        }
        for c in &self.contacts {
            for a in c.anchors.iter().flatten() {
                w.v(&a.p);
                w.v(&a.n);
                w.v(&a.delta);
                w.u8(u8::from(a.s));
            }
        }
        let n_feet = self.foot_mask.first().map_or(0, |m| m[0].len());
        w.u32(n_feet);
        for m in &self.foot_mask {
            for agent in m {
                agent.iter().for_each(|b| w.u8(u8::from(*b)));
            }
        }
        w.u32(self.affordance_gt.points.len());
        for (q, a) in self.affordance_gt.points.iter().zip(&self.affordance_gt.alpha) {
            w.v(q);
            w.f(*a);
        }
        w.0.write_u64::<LittleEndian>(self.meta.seed).unwrap();
        w.u32(self.meta.attempt as usize);
        let (o, p) = family_tags(&self.meta);
        w.u8(o);
        w.u8(p);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SynthError> {
        let mut r = Reader(bytes);
        let t_len = r.u32()?;
        let frame_rate = r.f()?;
        let n_joints = r.u32()?;
        let mut frames = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let mut pair = Vec::with_capacity(2);
            for _ in 0..2 {
                let mut theta = Vec::with_capacity(n_joints);
                for _ in 0..n_joints {
                    let mut r6 = [0.0; 6];
                    for x in r6.iter_mut() {
                        *x = r.f()?;
                    }
                    theta.push(Rot6D(r6));
                }
                let mut beta = [0.0; SHAPE_DIM];
                for x in beta.iter_mut() {
                    *x = r.f()?;
                }
                pair.push(AgentPose { theta, beta, gamma: r.v()? });
            }
            let b = pair.pop().unwrap();
            let a = pair.pop().unwrap();
            frames.push([a, b]);
        }
        let primitive = read_primitive(&mut r, 0)?;
        let mass = r.f()?;
        let mut inertia = [[0.0; 3]; 3];
        for row in inertia.iter_mut() {
            for x in row.iter_mut() {
                *x = r.f()?;
            }
        }
        let object = ObjectSpec { primitive, mass, inertia };
        let traj_rate = r.f()?;
        let mut poses = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            poses.push(Pose::new(r.m()?, r.v()?));
        }
        let mut contacts = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let mut anchors = [[ContactAnchor { p: Vector3::zeros(), n: Vector3::zeros(), delta: Vector3::zeros(), s: false }; 2]; 2];
            for a in anchors.iter_mut().flatten() {
                *a = ContactAnchor { p: r.v()?, n: r.v()?, delta: r.v()?, s: r.u8()? != 0 };
            }
            contacts.push(ContactFrame { anchors });
        }
        let n_feet = r.u32()?;
        let mut foot_mask = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let mut agent = || -> Result<Vec<bool>, SynthError> { (0..n_feet).map(|_| Ok(r.u8()? != 0)).collect() };
            let a = agent()?;
            let b = agent()?;
            foot_mask.push([a, b]);
        }
        let k = r.u32()?;
        let mut points = Vec::with_capacity(k);
        let mut alpha = Vec::with_capacity(k);
        for _ in 0..k {
            points.push(r.v()?);
            alpha.push(r.f()?);
        }
        let seed = r.0.read_u64::<LittleEndian>().map_err(|_| truncated())?;
        let attempt = r.u32()? as u32;
        let object_family = match r.u8()? {
            0 => ObjectFamily::Box,
            1 => ObjectFamily::Cylinder,
            2 => ObjectFamily::Composite,
            t => return Err(SynthError::BadFormat(format!("bad object family {t}"))),
        };
        let path_family = match r.u8()? {
            0 => PathFamily::Stationary,
            1 => PathFamily::Line,
            2 => PathFamily::Arc,
            3 => PathFamily::LiftTurn,
            t => return Err(SynthError::BadFormat(format!("bad path family {t}"))),
        };
        if !r.0.is_empty() {
            return Err(SynthError::BadFormat("trailing bytes in episode".into()));
        }
        Ok(Episode {
            motion: MotionSequence { frames, frame_rate },
            object,
            trajectory: ObjectTrajectory { poses, frame_rate: traj_rate },
            contacts,
            foot_mask,
            affordance_gt: AffordanceField { points, alpha },
            meta: EpisodeMeta { seed, attempt, object_family, path_family },
        })
    }
}

/// Serialized corpus: header, then per episode a u64 length, the payload and
/// its SHA-256 digest.
pub fn corpus_to_bytes(episodes: &[Episode]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.write_u16::<LittleEndian>(CORPUS_VERSION).unwrap();
    out.write_u32::<LittleEndian>(episodes.len() as u32).unwrap();
    for ep in episodes {
        let payload = ep.to_bytes();
        out.write_u64::<LittleEndian>(payload.len() as u64).unwrap();
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
    }
    out
}

pub fn corpus_from_bytes(bytes: &[u8]) -> Result<Vec<Episode>, SynthError> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| SynthError::BadFormat("missing header".into()))?;
    if &magic != CORPUS_MAGIC {
        return Err(SynthError::BadFormat("not a corpus file".into()));
    }
    let version = r.read_u16::<LittleEndian>().map_err(|_| SynthError::BadFormat("missing header".into()))?;
    if version != CORPUS_VERSION {
        return Err(SynthError::FormatVersionMismatch { found: version, expected: CORPUS_VERSION });
    }
    let count = r.read_u32::<LittleEndian>().map_err(|_| SynthError::BadFormat("missing header".into()))? as usize;
    let mut episodes = Vec::with_capacity(count.min(1 << 16));
    for episode in 0..count {
        let len = r.read_u64::<LittleEndian>().map_err(|_| SynthError::ChecksumMismatch { episode })? as usize;
        if r.len() < len.saturating_add(32) {
            return Err(SynthError::ChecksumMismatch { episode });
        }
        let (payload, rest) = r.split_at(len);
        let (digest, rest) = rest.split_at(32);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(SynthError::ChecksumMismatch { episode });
        }
        episodes.push(Episode::from_bytes(payload)?);
        r = rest;
    }
    if !r.is_empty() {
        return Err(SynthError::BadFormat("trailing bytes after corpus".into()));
    }
    Ok(episodes)
}

pub fn write_corpus(episodes: &[Episode], path: &Path) -> Result<(), SynthError> {
    std::fs::write(path, corpus_to_bytes(episodes))?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Episode>, SynthError> {
    corpus_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::penetration_depth;
    use crate::kinematics::forward_kinematics;

    fn params(path: PathFamily) -> EpisodeParams {
        EpisodeParams { path: Some(path), ..Default::default() }
    }

    #[test]
    fn rejects_short_episodes() {
        let p = EpisodeParams { frames: 8, ..Default::default() };
        assert!(matches!(generate_episode(0, &p), Err(SynthError::InvalidParams(_))));
    }

    #[test]
    fn stationary_feet_are_planted() {
        for seed in 0..6 {
            let ep = generate_episode(seed, &params(PathFamily::Stationary)).unwrap();
            for m in &ep.foot_mask {
                assert!(m.iter().flatten().all(|b| *b), "seed {seed}");
            }
        }
    }

    #[test]
    fn valid_contacts_on_surface_and_wrists_on_anchors() {
        let skel = Skeleton::default_21();
        for seed in 0..12 {
            let ep = generate_episode(seed, &EpisodeParams::default()).unwrap();
            assert_eq!(ep.len(), DEFAULT_FRAMES);
            assert_eq!(ep.contacts.len(), ep.len());
            assert_eq!(ep.trajectory.len(), ep.len());
            for (t, c) in ep.contacts.iter().enumerate() {
                let pose = &ep.trajectory.poses[t];
                for agent in 0..2 {
                    let joints = forward_kinematics(&skel, &ep.motion.frames[t][agent]).unwrap();
                    for hand in 0..2 {
                        let a = &c.anchors[agent][hand];
                        assert!((a.n.norm() - 1.0).abs() < 1e-9);
                        if a.s {
                            assert!(ep.object.signed_distance(pose, &a.p).abs() < 5e-3);
                            let wrist = joints[skel.wrist_joints[hand]];
                            assert!((wrist - a.p).norm() < 1e-2);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn oracle_penetration_small() {
        let skel = Skeleton::default_21();
        let radii = skel.radii();
        for seed in 0..12 {
            let ep = generate_episode(seed, &EpisodeParams::default()).unwrap();
            let mut total = 0.0;
            for (t, frame) in ep.motion.frames.iter().enumerate() {
                for pose in frame {
                    let joints = forward_kinematics(&skel, pose).unwrap();
                    total += penetration_depth(&joints, &radii, &ep.object, &ep.trajectory.poses[t]);
                }
            }
            let mean = total / (2.0 * ep.len() as f64);
            assert!(mean < 5e-3, "seed {seed}: {mean}");
        }
    }

    #[test]
    fn generation_is_pure() {
        let p = EpisodeParams::default();
        assert_eq!(generate_episode(7, &p).unwrap(), generate_episode(7, &p).unwrap());
        assert_ne!(generate_episode(7, &p).unwrap(), generate_episode(8, &p).unwrap());
    }

    #[test]
    fn affordance_peaks_at_sites() {
        let ep = generate_episode(3, &EpisodeParams::default()).unwrap();
        assert!(ep.affordance_gt.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        let max = ep.affordance_gt.alpha.iter().cloned().fold(0.0, f64::max);
        assert!(max > 0.5);
        let labels = affordance_labels(&[Vector3::new(1.0, 0.0, 0.0)], &[Vector3::new(1.1, 0.0, 0.0)]);
        assert!((labels[0] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn moving_paths_lift_feet() {
        let ep = generate_episode(2, &params(PathFamily::Line)).unwrap();
        let lifted = ep.foot_mask.iter().flat_map(|m| m.iter().flatten()).filter(|b| !**b).count();
        assert!(lifted > 0);
    }

    #[test]
    fn episode_and_corpus_round_trip() {
        let eps: Vec<Episode> = (0..4).map(|s| generate_episode(s, &EpisodeParams::default()).unwrap()).collect();
        for ep in &eps {
            assert_eq!(&Episode::from_bytes(&ep.to_bytes()).unwrap(), ep);
        }
        let bytes = corpus_to_bytes(&eps);
        assert_eq!(corpus_from_bytes(&bytes).unwrap(), eps);
        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(corpus_from_bytes(cut), Err(SynthError::ChecksumMismatch { episode: 3 })));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(corpus_from_bytes(&bad_version), Err(SynthError::FormatVersionMismatch { found: 9, .. })));
    }
}
