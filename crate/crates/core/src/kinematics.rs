//! Rotation representations, the reduced 21-joint skeleton, shape-driven bone
//! scaling and forward kinematics.
//!
//! Rotation matrices inside differentiable code are plain `[[S; 3]; 3]`
//! row-major arrays over a [`Real`] scalar so that decoding and FK can run on
//! either `f64` or tape variables.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnet::tape::Real;

pub const SHAPE_DIM: usize = 10;
pub const SHAPE_SCALE_LIMIT: f64 = 0.3;
const DEGENERATE_EPS: f64 = 1e-12;
const SKELETON_FORMAT_VERSION: u32 = 1;

static DEFAULT_SKELETON_JSON: &str = include_str!("../assets/skeleton21.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("degenerate 6D rotation {0:?}")]
    DegenerateInput([f64; 6]),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("skeleton json: {0}")]
    Json(String),
}

pub type Mat3<S> = [[S; 3]; 3];
pub type Vec3<S> = [S; 3];

/// First two columns of a rotation matrix, column-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub const IDENTITY: Rot6D = Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        matrix_to_rot6d(m)
    }

    pub fn to_matrix(&self) -> Result<Matrix3<f64>, KinematicsError> {
        rot6d_to_matrix(self)
    }

    /// Like [`Rot6D::to_matrix`] but maps degenerate input to identity.
    pub fn to_matrix_or_identity(&self) -> Matrix3<f64> {
        self.to_matrix().unwrap_or_else(|_| Matrix3::identity())
    }
}

pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Rot6D {
    Rot6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

pub fn rot6d_to_matrix(r: &Rot6D) -> Result<Matrix3<f64>, KinematicsError> {
    let m = gram_schmidt(&r.0).ok_or(KinematicsError::DegenerateInput(r.0))?;
    Ok(mat3_to_na(&m))
}

/// Gram–Schmidt reconstruction of a rotation from its 6D encoding.
/// `None` when either column collapses below 1e-12.
pub fn gram_schmidt<S: Real>(a: &[S; 6]) -> Option<Mat3<S>> {
    let c1 = [a[0], a[1], a[2]];
    let c2 = [a[3], a[4], a[5]];
    let n1 = dot(&c1, &c1).sqrt();
    if !(n1.value() >= DEGENERATE_EPS) {
        return None;
    }
    let b1 = scale(&c1, n1);
    let proj = dot(&b1, &c2);
    let u2 = [c2[0] - b1[0] * proj, c2[1] - b1[1] * proj, c2[2] - b1[2] * proj];
    let n2 = dot(&u2, &u2).sqrt();
    if !(n2.value() >= DEGENERATE_EPS) {
        return None;
    }
    let b2 = scale(&u2, n2);
    let b3 = cross(&b1, &b2);
    Some([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

fn scale<S: Real>(v: &Vec3<S>, norm: S) -> Vec3<S> {
    [v[0] / norm, v[1] / norm, v[2] / norm]
}

pub fn dot<S: Real>(a: &Vec3<S>, b: &Vec3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<S: Real>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn mat_mul<S: Real>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat_vec<S: Real>(a: &Mat3<S>, v: &Vec3<S>) -> Vec3<S> {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose<S: Real>(a: &Mat3<S>) -> Mat3<S> {
    [
        [a[0][0], a[1][0], a[2][0]],
        [a[0][1], a[1][1], a[2][1]],
        [a[0][2], a[1][2], a[2][2]],
    ]
}

pub fn add3<S: Real>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3<S: Real>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn identity_like<S: Real>(s: S) -> Mat3<S> {
    let (o, z) = (s.constant_like(1.0), s.constant_like(0.0));
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat3_to_na(m: &Mat3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
    )
}

pub fn na_to_mat3(m: &Matrix3<f64>) -> Mat3<f64> {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

/// Fixed joint-count × 10 matrix mapping shape coefficients to per-bone
/// relative scale changes. Rows have unit norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeBasis(pub Vec<[f64; SHAPE_DIM]>);

impl ShapeBasis {
    pub fn generate(joint_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..joint_count)
            .map(|_| {
                let mut row = [0.0; SHAPE_DIM];
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.map(|v| v / n)
            })
            .collect();
        ShapeBasis(rows)
    }

    /// Per-joint scale factor `1 + clamp((B·beta)_j, -0.3, 0.3)`.
    pub fn scales<S: Real>(&self, beta: &[S; SHAPE_DIM]) -> Vec<S> {
        self.0
            .iter()
            .map(|row| {
                let mut acc = beta[0] * row[0];
                for k in 1..SHAPE_DIM {
                    acc = acc + beta[k] * row[k];
                }
                let v = acc.value();
                if v > SHAPE_SCALE_LIMIT {
                    acc.constant_like(1.0 + SHAPE_SCALE_LIMIT)
                } else if v < -SHAPE_SCALE_LIMIT {
                    acc.constant_like(1.0 - SHAPE_SCALE_LIMIT)
                } else {
                    acc + 1.0
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDef {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: [f64; 3],
    /// Sphere radius used for body/object penetration.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SkeletonDoc {
    version: u32,
    joints: Vec<JointDef>,
    foot_joints: Vec<usize>,
    wrist_joints: [usize; 2],
    shape_basis: ShapeBasis,
}

/// Articulated tree with per-joint bone offsets (meters, in the parent frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub joints: Vec<JointDef>,
    pub foot_joints: Vec<usize>,
    /// (left, right)
    pub wrist_joints: [usize; 2],
    pub shape_basis: ShapeBasis,
}

impl Skeleton {
    /// The shipped 21-joint skeleton.
    pub fn default_21() -> Self {
        Self::from_json(DEFAULT_SKELETON_JSON).expect("shipped skeleton is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let doc: SkeletonDoc =
            serde_json::from_str(text).map_err(|e| KinematicsError::Json(e.to_string()))?;
        if doc.version != SKELETON_FORMAT_VERSION {
            return Err(KinematicsError::InvalidSkeleton(format!(
                "unsupported skeleton version {}",
                doc.version
            )));
        }
        let skel = Skeleton {
            joints: doc.joints,
            foot_joints: doc.foot_joints,
            wrist_joints: doc.wrist_joints,
            shape_basis: doc.shape_basis,
        };
        skel.validate()?;
        Ok(skel)
    }

    pub fn to_json(&self) -> String {
        let doc = SkeletonDoc {
            version: SKELETON_FORMAT_VERSION,
            joints: self.joints.clone(),
            foot_joints: self.foot_joints.clone(),
            wrist_joints: self.wrist_joints,
            shape_basis: self.shape_basis.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("skeleton serializes")
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let bad = |m: String| Err(KinematicsError::InvalidSkeleton(m));
        let n = self.joints.len();
        if n == 0 || self.joints[0].parent.is_some() {
            return bad("joint 0 must be the parentless root".into());
        }
        for (j, def) in self.joints.iter().enumerate().skip(1) {
            match def.parent {
                Some(p) if p < j => {}
                _ => return bad(format!("joint {j} must have a parent with a smaller index")),
            }
            if def.offset.iter().all(|v| *v == 0.0) {
                return bad(format!("joint {j} has a zero bone offset"));
            }
        }
        if self.joints.iter().any(|d| d.radius <= 0.0) {
            return bad("joint radii must be positive".into());
        }
        let all: Vec<usize> = self.foot_joints.iter().chain(&self.wrist_joints).copied().collect();
        if all.iter().any(|&j| j == 0 || j >= n) {
            return bad("foot/wrist indices out of range".into());
        }
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != all.len() {
            return bad("foot and wrist joints must be disjoint".into());
        }
        if self.shape_basis.0.len() != n {
            return bad("shape basis needs one row per joint".into());
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.joints[j].parent
    }

    pub fn radii(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.radius).collect()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Chain of joints from the root down to `j`, inclusive.
    pub fn chain_to(&self, mut j: usize) -> Vec<usize> {
        let mut chain = vec![j];
        while let Some(p) = self.parent(j) {
            chain.push(p);
            j = p;
        }
        chain.reverse();
        chain
    }

    /// Shape-scaled bone offsets for any scalar type.
    pub fn scaled_offsets<S: Real>(&self, beta: &[S; SHAPE_DIM]) -> Vec<Vec3<S>> {
        let scales = self.shape_basis.scales(beta);
        self.joints
            .iter()
            .zip(scales)
            .map(|(def, s)| [s * def.offset[0], s * def.offset[1], s * def.offset[2]])
            .collect()
    }

    /// Pelvis height that puts the lowest foot joint of the rest pose on the ground.
    pub fn standing_height(&self, beta: &[f64; SHAPE_DIM]) -> f64 {
        let offsets = self.apply_shape(beta);
        let mut z = vec![0.0; self.joint_count()];
        for j in 1..self.joint_count() {
            z[j] = z[self.parent(j).unwrap()] + offsets[j].z;
        }
        -z.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Per-joint shape-scaled offsets (`beta` entries are expected in [-3, 3]).
    pub fn apply_shape(&self, beta: &[f64; SHAPE_DIM]) -> Vec<Vector3<f64>> {
        self.scaled_offsets(beta)
            .into_iter()
            .map(|o| Vector3::new(o[0], o[1], o[2]))
            .collect()
    }
}

/// One agent at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    /// Local joint rotations, root first.
    pub theta: Vec<Rot6D>,
    pub beta: [f64; SHAPE_DIM],
    /// Root translation in meters.
    pub gamma: Vector3<f64>,
}

impl AgentPose {
    pub fn rest(joint_count: usize) -> Self {
        AgentPose {
            theta: vec![Rot6D::IDENTITY; joint_count],
            beta: [0.0; SHAPE_DIM],
            gamma: Vector3::zeros(),
        }
    }

    pub fn rotation_matrices(&self) -> Vec<Matrix3<f64>> {
        self.theta.iter().map(Rot6D::to_matrix_or_identity).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().all(|v| v.is_finite())
            && self.gamma.iter().all(|v| v.is_finite())
            && self.theta.iter().all(|r| r.0.iter().all(|v| v.is_finite()))
    }
}

/// Dual-agent motion, `frames[t][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub frames: Vec<[AgentPose; 2]>,
    pub frame_rate: f64,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self, skel: &Skeleton) -> Result<(), KinematicsError> {
        if self.frames.len() < 2 {
            return Err(KinematicsError::InvalidSkeleton("motion needs at least 2 frames".into()));
        }
        let j = skel.joint_count();
        for frame in &self.frames {
            for (a, pose) in frame.iter().enumerate() {
                if pose.theta.len() != j {
                    return Err(KinematicsError::ShapeMismatch {
                        expected: j,
                        got: pose.theta.len(),
                    });
                }
                if pose.beta != self.frames[0][a].beta {
                    return Err(KinematicsError::InvalidSkeleton(
                        "beta must be constant across frames".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// World joint positions `[t][a][j]`.
    pub fn joint_positions(&self, skel: &Skeleton) -> Result<Vec<[Vec<Vector3<f64>>; 2]>, KinematicsError> {
        self.frames
            .iter()
            .map(|f| {
                Ok([
                    forward_kinematics(skel, &f[0])?,
                    forward_kinematics(skel, &f[1])?,
                ])
            })
            .collect()
    }
}

/// Generic FK over already-decoded local rotations and scaled offsets.
/// Returns world positions and world rotations.
pub fn fk_generic<S: Real>(
    skel: &Skeleton,
    local_rot: &[Mat3<S>],
    offsets: &[Vec3<S>],
    gamma: Vec3<S>,
) -> (Vec<Vec3<S>>, Vec<Mat3<S>>) {
    let n = skel.joint_count();
    let mut pos: Vec<Vec3<S>> = Vec::with_capacity(n);
    let mut world: Vec<Mat3<S>> = Vec::with_capacity(n);
    pos.push(gamma);
    world.push(local_rot[0]);
    for j in 1..n {
        let p = skel.parent(j).unwrap();
        let w = world[p];
        pos.push(add3(&pos[p], &mat_vec(&w, &offsets[j])));
        world.push(mat_mul(&w, &local_rot[j]));
    }
    (pos, world)
}

/// FK evaluated only along the chains that end at `wanted`. `local_rot` is
/// queried once per needed joint. Positions come back in `wanted` order.
pub fn fk_subset<S: Real>(
    skel: &Skeleton,
    mut local_rot: impl FnMut(usize) -> Mat3<S>,
    offsets: &[Vec3<S>],
    gamma: Vec3<S>,
    wanted: &[usize],
) -> Vec<Vec3<S>> {
    let n = skel.joint_count();
    let mut needed = vec![false; n];
    for &w in wanted {
        for j in skel.chain_to(w) {
            needed[j] = true;
        }
    }
    let mut pos: Vec<Option<Vec3<S>>> = vec![None; n];
    let mut world: Vec<Option<Mat3<S>>> = vec![None; n];
    for j in 0..n {
        if !needed[j] {
            continue;
        }
        let r = local_rot(j);
        match skel.parent(j) {
            None => {
                pos[j] = Some(gamma);
                world[j] = Some(r);
            }
            Some(p) => {
                let w = world[p].expect("parent evaluated first");
                pos[j] = Some(add3(&pos[p].unwrap(), &mat_vec(&w, &offsets[j])));
                world[j] = Some(mat_mul(&w, &r));
            }
        }
    }
    wanted.iter().map(|&w| pos[w].unwrap()).collect()
}

/// World positions of all joints. Degenerate rotations decode to identity.
pub fn forward_kinematics(skel: &Skeleton, pose: &AgentPose) -> Result<Vec<Vector3<f64>>, KinematicsError> {
    let (pos, _) = forward_kinematics_full(skel, pose)?;
    Ok(pos)
}

/// World positions and world rotations.
pub fn forward_kinematics_full(
    skel: &Skeleton,
    pose: &AgentPose,
) -> Result<(Vec<Vector3<f64>>, Vec<Matrix3<f64>>), KinematicsError> {
    if pose.theta.len() != skel.joint_count() {
        return Err(KinematicsError::ShapeMismatch {
            expected: skel.joint_count(),
            got: pose.theta.len(),
        });
    }
    let rots: Vec<Mat3<f64>> = pose
        .theta
        .iter()
        .map(|r| gram_schmidt(&r.0).unwrap_or_else(|| identity_like(1.0)))
        .collect();
    let offsets = skel.scaled_offsets(&pose.beta);
    let g = [pose.gamma.x, pose.gamma.y, pose.gamma.z];
    let (pos, world) = fk_generic(skel, &rots, &offsets, g);
    Ok((
        pos.into_iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
        world.iter().map(mat3_to_na).collect(),
    ))
}

/// Rotation about `axis` by `angle` radians.
pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    if angle == 0.0 || axis.norm() == 0.0 {
        return Matrix3::identity();
    }
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Exponential map of a rotation vector.
pub fn rotvec_to_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*v).into_inner()
}

/// Logarithm map (rotation vector) of a proper rotation.
pub fn matrix_to_rotvec(m: &Matrix3<f64>) -> Vector3<f64> {
    let q = nalgebra::UnitQuaternion::from_matrix(m);
    q.scaled_axis()
}

/// Heading angle (yaw about +z) of a rotation's local +x axis.
pub fn yaw_of(m: &Matrix3<f64>) -> f64 {
    m[(1, 0)].atan2(m[(0, 0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        // uniform over SO(3): normalized Gaussian quaternion
        let q = nalgebra::Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
    }

    #[test]
    fn identity_and_scale_invariance() {
        let id = rot6d_to_matrix(&Rot6D::IDENTITY).unwrap();
        assert_eq!(id, Matrix3::identity());
        let scaled = rot6d_to_matrix(&Rot6D([2.0, 0.0, 0.0, 0.0, 3.0, 0.0])).unwrap();
        assert!((scaled - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(
            rot6d_to_matrix(&Rot6D([0.0; 6])),
            Err(KinematicsError::DegenerateInput(_))
        ));
        // parallel columns collapse after orthogonalization
        assert!(rot6d_to_matrix(&Rot6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn round_trip_over_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap();
            assert!((back - r).abs().max() < 1e-9);
            assert!((back.determinant() - 1.0).abs() < 1e-9);
            assert!((back.transpose() * back - Matrix3::identity()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn shipped_skeleton_is_valid_and_matches_seeded_basis() {
        let skel = Skeleton::default_21();
        assert_eq!(skel.joint_count(), 21);
        assert_eq!(skel.shape_basis, ShapeBasis::generate(21, 0));
        for row in &skel.shape_basis.0 {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let round = Skeleton::from_json(&skel.to_json()).unwrap();
        assert_eq!(round, skel);
    }

    #[test]
    fn rest_pose_is_cumulative_offsets() {
        let skel = Skeleton::default_21();
        let pose = AgentPose::rest(21);
        let pos = forward_kinematics(&skel, &pose).unwrap();
        for j in 1..21 {
            let p = skel.parent(j).unwrap();
            let off = Vector3::from(skel.joints[j].offset);
            assert!((pos[j] - pos[p] - off).norm() < 1e-15);
        }
        let mut shifted = pose.clone();
        shifted.gamma = Vector3::new(1.0, 2.0, 3.0);
        let pos2 = forward_kinematics(&skel, &shifted).unwrap();
        for j in 0..21 {
            assert!((pos2[j] - pos[j] - shifted.gamma).norm() < 1e-12);
        }
    }

    #[test]
    fn two_link_chain_yaw() {
        let joints = vec![
            JointDef { name: "a".into(), parent: None, offset: [0.0; 3], radius: 0.1 },
            JointDef { name: "b".into(), parent: Some(0), offset: [1.0, 0.0, 0.0], radius: 0.1 },
            JointDef { name: "c".into(), parent: Some(1), offset: [1.0, 0.0, 0.0], radius: 0.1 },
        ];
        let skel = Skeleton {
            joints,
            foot_joints: vec![1],
            wrist_joints: [2, 2],
            shape_basis: ShapeBasis(vec![[0.0; 10]; 3]),
        };
        let mut pose = AgentPose::rest(3);
        pose.theta[0] = Rot6D::from_matrix(&axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2));
        // hand oracle: tip of a straight 2-unit chain yawed 90° lands on +y
        let pos = forward_kinematics(&skel, &pose).unwrap();
        assert!((pos[2] - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
        // bend the second link back by 90°: tip = (0,1,0) + R_z(180°)·(1,0,0)
        pose.theta[1] = Rot6D::from_matrix(&axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2));
        let pos = forward_kinematics(&skel, &pose).unwrap();
        assert!((pos[2] - Vector3::new(-1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn fk_shape_mismatch() {
        let skel = Skeleton::default_21();
        let pose = AgentPose::rest(20);
        assert!(matches!(
            forward_kinematics(&skel, &pose),
            Err(KinematicsError::ShapeMismatch { expected: 21, got: 20 })
        ));
    }

    #[test]
    fn apply_shape_zero_and_clamp() {
        let skel = Skeleton::default_21();
        let zero = skel.apply_shape(&[0.0; 10]);
        for (o, d) in zero.iter().zip(&skel.joints) {
            assert_eq!(*o, Vector3::from(d.offset));
        }
        // beta along a row with norm 0.3 saturates that row exactly at the clamp boundary
        let row = skel.shape_basis.0[7];
        let beta = row.map(|v| v * 0.3);
        let s = skel.shape_basis.scales(&beta)[7];
        assert!((s - 1.3).abs() < 1e-12);
        let big = row.map(|v| v * 3.0);
        assert_eq!(skel.shape_basis.scales(&big)[7], 1.3);
    }

    #[test]
    fn limb_scale_monotone_along_basis_direction() {
        let skel = Skeleton::default_21();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let beta: [f64; 10] = std::array::from_fn(|_| rng.gen_range(-0.2..0.2));
            let j = rng.gen_range(1..21);
            let dir = skel.shape_basis.0[j];
            let len = |b: &[f64; 10]| skel.apply_shape(b)[j].norm();
            let h = 1e-4;
            let plus: [f64; 10] = std::array::from_fn(|k| beta[k] + h * dir[k]);
            let minus: [f64; 10] = std::array::from_fn(|k| beta[k] - h * dir[k]);
            let fd = (len(&plus) - len(&minus)) / (2.0 * h);
            let base = Vector3::from(skel.joints[j].offset).norm();
            // inside the clamp the derivative along the unit row is exactly the base length
            if skel.shape_basis.scales(&beta)[j] < 1.3 - 1e-3 && skel.shape_basis.scales(&beta)[j] > 0.7 + 1e-3 {
                assert!((fd - base).abs() < 1e-6, "fd {fd} base {base}");
            }
            assert!(fd >= 0.0);
        }
    }

    #[test]
    fn standing_height_puts_toes_on_ground() {
        let skel = Skeleton::default_21();
        let beta = [0.5, -0.3, 0.2, 0.0, 0.1, 0.0, 0.0, -0.4, 0.3, 0.0];
        let mut pose = AgentPose::rest(21);
        pose.beta = beta;
        pose.gamma = Vector3::new(0.0, 0.0, skel.standing_height(&beta));
        let pos = forward_kinematics(&skel, &pose).unwrap();
        let min_z = pos.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
        assert!(min_z.abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn scale_stays_in_bounds(beta in proptest::array::uniform10(-3.0f64..3.0)) {
            let skel = Skeleton::default_21();
            for s in skel.shape_basis.scales(&beta) {
                prop_assert!((0.7..=1.3).contains(&s));
            }
        }

        #[test]
        fn fk_is_rotation_equivariant(
            yaw in -3.0f64..3.0, pitch in -1.0f64..1.0,
            gx in -2.0f64..2.0, gy in -2.0f64..2.0, gz in 0.0f64..2.0,
            seed in 0u64..1000,
        ) {
            let skel = Skeleton::default_21();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pose = AgentPose::rest(21);
            for r in pose.theta.iter_mut() {
                *r = Rot6D::from_matrix(&random_rotation(&mut rng));
            }
            pose.gamma = Vector3::new(gx, gy, gz);
            let g = axis_angle(Vector3::z(), yaw) * axis_angle(Vector3::y(), pitch);
            let mut rotated = pose.clone();
            rotated.theta[0] = Rot6D::from_matrix(&(g * pose.theta[0].to_matrix().unwrap()));
            rotated.gamma = g * pose.gamma;
            let a = forward_kinematics(&skel, &pose).unwrap();
            let b = forward_kinematics(&skel, &rotated).unwrap();
            for j in 0..21 {
                prop_assert!((g * a[j] - b[j]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn subset_fk_matches_full_fk() {
        let skel = Skeleton::default_21();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rots: Vec<Matrix3<f64>> = (0..21).map(|_| random_rotation(&mut rng)).collect();
        let pose = AgentPose {
            theta: rots.iter().map(Rot6D::from_matrix).collect(),
            beta: [0.4; SHAPE_DIM],
            gamma: Vector3::new(0.3, -0.2, 0.9),
        };
        let full = forward_kinematics(&skel, &pose).unwrap();
        let offsets = skel.scaled_offsets(&pose.beta);
        let wanted = [16, 8, 4];
        let sub = fk_subset(&skel, |j| na_to_mat3(&rots[j]), &offsets, [0.3, -0.2, 0.9], &wanted);
        for (p, &j) in sub.iter().zip(&wanted) {
            assert!((Vector3::new(p[0], p[1], p[2]) - full[j]).norm() < 1e-12);
        }
    }
}
