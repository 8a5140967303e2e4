//! Stability-driven refinement: a small simulator for two PD-driven agents
//! and one rigid object, the physical cost of a rollout, CMA-ES over
//! corrective target offsets and the sampler hook that applies it before the
//! last Euler step.

pub mod cma;

pub use cma::{cma_minimize, CmaConfig, CmaResult, CmaState, EIGEN_FLOOR};

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowgen::{decode, encode, FlowError, FlowLayout, FlowModel, FlowState, Guidance};
use crate::geometry::{sample_surface, GeometryError, ObjectSpec, ObjectTrajectory, Pose};
use crate::kinematics::{KinematicsError, MotionSequence, Rot6D, Skeleton, SHAPE_DIM};
use crate::synthdata::{ContactAnchor, ContactFrame};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("simulation diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGain {
    pub kp: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub physics_rate: f64,
    pub control_rate: f64,
    pub gravity: [f64; 3],
    /// Hand-object spring (N/m) and damper (N·s/m).
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    /// A free hand grips its anchor once within this distance.
    pub attach_radius: f64,
    /// A gripping hand lets go beyond this distance.
    pub release_radius: f64,
    /// Ground penalty per object sample point.
    pub ground_stiffness: f64,
    pub ground_damping: f64,
    /// Tangential damping of penetrating ground points.
    pub ground_friction: f64,
    pub ground_points: usize,
    /// Penalty between joint spheres and the object.
    pub collision_stiffness: f64,
    pub collision_damping: f64,
    /// Gain of every joint without an entry in `joint_gains`.
    pub joint_gain: PdGain,
    /// Per-joint gains; empty, or one per joint.
    pub joint_gains: Vec<PdGain>,
    pub root_gain: PdGain,
    /// Mass that scales external forces on the root translation.
    pub agent_mass: f64,
    /// Track target velocities instead of damping towards rest.
    pub velocity_feedforward: bool,
    pub max_speed: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            physics_rate: 240.0,
            control_rate: 60.0,
            gravity: [0.0, 0.0, -9.81],
            contact_stiffness: 2000.0,
            contact_damping: 50.0,
            attach_radius: 0.05,
            release_radius: 0.05,
            ground_stiffness: 2000.0,
            ground_damping: 20.0,
            ground_friction: 20.0,
            ground_points: 64,
            collision_stiffness: 20000.0,
            collision_damping: 100.0,
            joint_gain: PdGain { kp: 1e4, kd: 200.0 },
            joint_gains: Vec::new(),
            root_gain: PdGain { kp: 1e4, kd: 200.0 },
            agent_mass: 70.0,
            velocity_feedforward: true,
            max_speed: 1e3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.physics_rate > 0.0 && self.control_rate > 0.0) {
            return bad("rates must be positive");
        }
        let ratio = self.physics_rate / self.control_rate;
        if ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
            return bad("physics_rate must be an integer multiple of control_rate");
        }
        let gains = std::iter::once(&self.joint_gain)
            .chain(&self.joint_gains)
            .chain(std::iter::once(&self.root_gain));
        for g in gains {
            if !(g.kp > 0.0 && g.kd > 0.0) {
                return bad("PD gains must be positive");
            }
        }
        let non_negative = [
            self.contact_stiffness,
            self.contact_damping,
            self.ground_stiffness,
            self.ground_damping,
            self.ground_friction,
            self.collision_stiffness,
            self.collision_damping,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("stiffness and damping must be finite and non-negative");
        }
        if !(self.attach_radius > 0.0 && self.agent_mass > 0.0 && self.max_speed > 0.0) {
            return bad("attach radius, agent mass and speed limit must be positive");
        }
        if !(self.release_radius >= self.attach_radius) {
            return bad("release radius must not be below the attach radius");
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return bad("gravity must be finite");
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.physics_rate / self.control_rate).round() as usize
    }

    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    fn gain(&self, j: usize) -> PdGain {
        self.joint_gains.get(j).copied().unwrap_or(self.joint_gain)
    }
}

// ---------------------------------------------------------------------------
// State

/// One agent: every joint is an independent unit-inertia rotational double
/// integrator; the root also translates.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    /// Local joint rotations, root first (root is the world orientation).
    pub rotations: Vec<Matrix3<f64>>,
    /// Joint angular velocities in the parent frame.
    pub angular_velocities: Vec<Vector3<f64>>,
    pub root: Vector3<f64>,
    pub root_velocity: Vector3<f64>,
    pub beta: [f64; SHAPE_DIM],
    /// Whether each hand (left, right) currently grips its anchor.
    pub grips: [bool; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// World frame.
    pub angular_velocity: Vector3<f64>,
}

impl ObjectState {
    pub fn at_rest(pose: &Pose) -> Self {
        ObjectState {
            rotation: pose.rotation,
            translation: pose.translation,
            velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub agents: Vec<AgentState>,
    pub object: Option<ObjectState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTarget {
    pub rotations: Vec<Matrix3<f64>>,
    pub angular_velocities: Vec<Vector3<f64>>,
    pub root: Vector3<f64>,
    pub root_velocity: Vector3<f64>,
}

impl AgentTarget {
    /// Holds `state`'s current pose.
    pub fn hold(state: &AgentState) -> Self {
        AgentTarget {
            rotations: state.rotations.clone(),
            angular_velocities: vec![Vector3::zeros(); state.rotations.len()],
            root: state.root,
            root_velocity: Vector3::zeros(),
        }
    }
}

/// A hand's attachment point on the object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weld {
    pub agent: usize,
    /// 0 = left, 1 = right.
    pub hand: usize,
    /// Body-frame point the wrist centre is pulled to.
    pub point: Vector3<f64>,
    /// Body-frame outward surface normal.
    pub normal: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlTarget {
    pub agents: Vec<AgentTarget>,
    pub welds: Vec<Weld>,
}

/// External loads on the object over one control frame, averaged over its
/// substeps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameLoads {
    /// Resultant force, gravity included.
    pub force: Vector3<f64>,
    /// Resultant torque about the centre of mass.
    pub torque: Vector3<f64>,
    /// Hand normal-force magnitude over the object's weight.
    pub margin: f64,
}

// ---------------------------------------------------------------------------
// Simulator

fn rotvec(v: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*v).into_inner()
}

/// Rotation vector of a (nearly) proper rotation; stays finite when rounding
/// pushes the trace past 3.
fn log_map(m: &Matrix3<f64>) -> Vector3<f64> {
    let w = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5;
    let s = w.norm();
    let c = (m.trace() - 1.0) * 0.5;
    if c > -0.99 {
        let angle = s.atan2(c);
        return if s > 1e-12 { w * (angle / s) } else { w };
    }
    nalgebra::UnitQuaternion::from_matrix(m).scaled_axis()
}

pub struct Simulator<'a> {
    cfg: &'a SimConfig,
    skel: &'a Skeleton,
    object: Option<&'a ObjectSpec>,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
    ground_points: Vec<Vector3<f64>>,
    /// Strict ancestors of every joint.
    ancestors: Vec<Vec<usize>>,
    radii: Vec<f64>,
}

struct Kinematic {
    pos: Vec<Vector3<f64>>,
    /// World rotation of each joint's parent frame (world for the root).
    parent_world: Vec<Matrix3<f64>>,
    /// World angular velocity contributed by each joint.
    spin: Vec<Vector3<f64>>,
}

impl Kinematic {
    fn velocity(&self, agent: &AgentState, ancestors: &[usize], p: &Vector3<f64>) -> Vector3<f64> {
        ancestors
            .iter()
            .fold(agent.root_velocity, |v, &k| v + self.spin[k].cross(&(p - self.pos[k])))
    }
}

/// Generalized forces on one agent.
struct AgentLoads {
    torques: Vec<Vector3<f64>>,
    force: Vector3<f64>,
}

impl<'a> Simulator<'a> {
    pub fn new(cfg: &'a SimConfig, skel: &'a Skeleton, object: Option<&'a ObjectSpec>) -> Result<Self, SimError> {
        cfg.validate()?;
        if !cfg.joint_gains.is_empty() && cfg.joint_gains.len() != skel.joint_count() {
            return Err(SimError::ShapeMismatch {
                expected: skel.joint_count(),
                got: cfg.joint_gains.len(),
            });
        }
        let (inertia, inertia_inv, ground_points) = match object {
            Some(obj) => {
                obj.validate()?;
                let i = obj.inertia_matrix();
                let inv = i
                    .try_inverse()
                    .ok_or_else(|| SimError::InvalidConfig("object inertia is singular".into()))?;
                let pts = sample_surface(obj, cfg.ground_points, 0).into_iter().map(|s| s.point).collect();
                (i, inv, pts)
            }
            None => (Matrix3::identity(), Matrix3::identity(), Vec::new()),
        };
        let ancestors = (0..skel.joint_count())
            .map(|j| {
                let mut chain = skel.chain_to(j);
                chain.pop();
                chain
            })
            .collect();
        Ok(Simulator {
            cfg,
            skel,
            object,
            inertia,
            inertia_inv,
            ground_points,
            ancestors,
            radii: skel.radii(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        self.cfg
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.cfg.physics_rate
    }

    fn kinematics(&self, agent: &AgentState, offsets: &[Vector3<f64>]) -> Kinematic {
        let n = self.skel.joint_count();
        let mut pos = Vec::with_capacity(n);
        let mut world: Vec<Matrix3<f64>> = Vec::with_capacity(n);
        let mut parent_world = Vec::with_capacity(n);
        pos.push(agent.root);
        world.push(agent.rotations[0]);
        parent_world.push(Matrix3::identity());
        for j in 1..n {
            let p = self.skel.parent(j).unwrap();
            let w = world[p];
            pos.push(pos[p] + w * offsets[j]);
            world.push(w * agent.rotations[j]);
            parent_world.push(w);
        }
        let spin = (0..n).map(|j| parent_world[j] * agent.angular_velocities[j]).collect();
        Kinematic { pos, parent_world, spin }
    }

    fn push(&self, kin: &Kinematic, loads: &mut AgentLoads, joint: usize, point: &Vector3<f64>, force: &Vector3<f64>) {
        loads.force += force;
        for &k in &self.ancestors[joint] {
            let world = (point - kin.pos[k]).cross(force);
            loads.torques[k] += kin.parent_world[k].transpose() * world;
        }
    }

    fn check_agent(&self, state: &AgentState) -> Result<(), SimError> {
        let n = self.skel.joint_count();
        if state.rotations.len() != n || state.angular_velocities.len() != n {
            return Err(SimError::ShapeMismatch {
                expected: n,
                got: state.rotations.len().min(state.angular_velocities.len()),
            });
        }
        Ok(())
    }

    /// Advances `state` by one control frame towards `target`.
    pub fn step(&self, state: &mut SimState, target: &ControlTarget) -> Result<FrameLoads, SimError> {
        if target.agents.len() != state.agents.len() {
            return Err(SimError::ShapeMismatch {
                expected: state.agents.len(),
                got: target.agents.len(),
            });
        }
        if state.object.is_some() != self.object.is_some() {
            return Err(SimError::InvalidConfig("state and simulator disagree on the object".into()));
        }
        for (a, t) in state.agents.iter().zip(&target.agents) {
            self.check_agent(a)?;
            if t.rotations.len() != a.rotations.len() || t.angular_velocities.len() != a.rotations.len() {
                return Err(SimError::ShapeMismatch {
                    expected: a.rotations.len(),
                    got: t.rotations.len().min(t.angular_velocities.len()),
                });
            }
        }
        for w in &target.welds {
            if w.agent >= state.agents.len() || w.hand > 1 {
                return Err(SimError::InvalidConfig(format!("weld on agent {} hand {}", w.agent, w.hand)));
            }
        }
        let offsets: Vec<Vec<Vector3<f64>>> = state
            .agents
            .iter()
            .map(|a| {
                self.skel
                    .scaled_offsets(&a.beta)
                    .into_iter()
                    .map(Vector3::from)
                    .collect()
            })
            .collect();
        let substeps = self.cfg.substeps();
        let mut acc = FrameLoads::default();
        for _ in 0..substeps {
            let loads = self.substep(state, target, &offsets)?;
            acc.force += loads.force;
            acc.torque += loads.torque;
            acc.margin += loads.margin;
        }
        let n = substeps as f64;
        Ok(FrameLoads {
            force: acc.force / n,
            torque: acc.torque / n,
            margin: acc.margin / n,
        })
    }

    fn substep(
        &self,
        state: &mut SimState,
        target: &ControlTarget,
        offsets: &[Vec<Vector3<f64>>],
    ) -> Result<FrameLoads, SimError> {
        let cfg = self.cfg;
        let h = self.dt();
        let g = cfg.gravity();
        let kins: Vec<Kinematic> = state
            .agents
            .iter()
            .zip(offsets)
            .map(|(a, o)| self.kinematics(a, o))
            .collect();
        let mut agent_loads: Vec<AgentLoads> = state
            .agents
            .iter()
            .map(|a| AgentLoads {
                torques: vec![Vector3::zeros(); a.rotations.len()],
                force: Vector3::zeros(),
            })
            .collect();
        let mut loads = FrameLoads::default();

        if let (Some(obj), Some(o)) = (self.object, state.object.as_mut()) {
            let pose = o.pose();
            let point_velocity = |p: &Vector3<f64>| o.velocity + o.angular_velocity.cross(&(p - o.translation));
            let mut force = Vector3::zeros();
            let mut torque = Vector3::zeros();
            let mut normal_total = 0.0;

            let mut held = vec![[false; 2]; state.agents.len()];
            for w in &target.welds {
                let joint = self.skel.wrist_joints[w.hand];
                let kin = &kins[w.agent];
                let wrist = kin.pos[joint];
                let anchor = pose.to_world(&w.point);
                let stretch = wrist - anchor;
                let reach = if state.agents[w.agent].grips[w.hand] {
                    cfg.release_radius
                } else {
                    cfg.attach_radius
                };
                if stretch.norm() > reach {
                    continue;
                }
                held[w.agent][w.hand] = true;
                let rel = kin.velocity(&state.agents[w.agent], &self.ancestors[joint], &wrist) - point_velocity(&anchor);
                let f = stretch * cfg.contact_stiffness + rel * cfg.contact_damping;
                force += f;
                torque += (anchor - o.translation).cross(&f);
                normal_total += f.dot(&(o.rotation * w.normal)).abs();
                self.push(kin, &mut agent_loads[w.agent], joint, &wrist, &-f);
            }

            for (agent, h) in state.agents.iter_mut().zip(held) {
                agent.grips = h;
            }

            let reach = obj.bounding_radius();
            for (a, kin) in kins.iter().enumerate() {
                for (j, p) in kin.pos.iter().enumerate() {
                    let r = self.radii[j];
                    if (p - o.translation).norm() > reach + r {
                        continue;
                    }
                    let d = obj.signed_distance(&pose, p);
                    if d >= r {
                        continue;
                    }
                    let n = obj.sdf_gradient(&pose, p);
                    let norm = n.norm();
                    if !(norm > 0.0) {
                        continue;
                    }
                    let n = n / norm;
                    let contact = p - n * d;
                    let rel = kin.velocity(&state.agents[a], &self.ancestors[j], p) - point_velocity(&contact);
                    let magnitude = (cfg.collision_stiffness * (r - d) - cfg.collision_damping * rel.dot(&n)).max(0.0);
                    if magnitude == 0.0 {
                        continue;
                    }
                    let f = n * magnitude;
                    force -= f;
                    torque += (contact - o.translation).cross(&-f);
                    self.push(kin, &mut agent_loads[a], j, p, &f);
                }
            }

            if o.translation.z - reach < 0.0 {
                for b in &self.ground_points {
                    let q = pose.to_world(b);
                    if q.z >= 0.0 {
                        continue;
                    }
                    let v = point_velocity(&q);
                    let fz = (-cfg.ground_stiffness * q.z - cfg.ground_damping * v.z).max(0.0);
                    if fz == 0.0 {
                        continue;
                    }
                    let f = Vector3::new(-cfg.ground_friction * v.x, -cfg.ground_friction * v.y, fz);
                    force += f;
                    torque += (q - o.translation).cross(&f);
                }
            }

            // gravity is integrated exactly; contact forces semi-implicitly
            let mass = obj.mass;
            o.velocity += (g + force / mass) * h;
            o.translation += o.velocity * h - g * (0.5 * h * h);
            let i_world = o.rotation * self.inertia * o.rotation.transpose();
            let i_world_inv = o.rotation * self.inertia_inv * o.rotation.transpose();
            let w = o.angular_velocity;
            o.angular_velocity += i_world_inv * (torque - w.cross(&(i_world * w))) * h;
            o.rotation = rotvec(&(o.angular_velocity * h)) * o.rotation;

            loads = FrameLoads {
                force: force + g * mass,
                torque,
                margin: normal_total / (g.norm() * mass).max(f64::MIN_POSITIVE),
            };
            let speed = o.velocity.norm().max(o.angular_velocity.norm());
            if !(speed <= cfg.max_speed) {
                return Err(SimError::Diverged(format!("object speed {speed:.3e}")));
            }
        }

        for ((agent, t), l) in state.agents.iter_mut().zip(&target.agents).zip(&agent_loads) {
            for j in 0..agent.rotations.len() {
                let gain = cfg.gain(j);
                let r = agent.rotations[j];
                let err = if t.rotations[j] == r {
                    Vector3::zeros()
                } else {
                    log_map(&(t.rotations[j] * r.transpose()))
                };
                let ff = if cfg.velocity_feedforward {
                    t.angular_velocities[j]
                } else {
                    Vector3::zeros()
                };
                let tau = err * gain.kp + (ff - agent.angular_velocities[j]) * gain.kd + l.torques[j];
                agent.angular_velocities[j] += tau * h;
                if agent.angular_velocities[j] != Vector3::zeros() {
                    agent.rotations[j] = rotvec(&(agent.angular_velocities[j] * h)) * r;
                }
            }
            let gain = cfg.root_gain;
            let ff = if cfg.velocity_feedforward {
                t.root_velocity
            } else {
                Vector3::zeros()
            };
            let acc = (t.root - agent.root) * gain.kp + (ff - agent.root_velocity) * gain.kd + l.force / cfg.agent_mass;
            agent.root_velocity += acc * h;
            agent.root += agent.root_velocity * h;
            let speed = agent
                .angular_velocities
                .iter()
                .map(|w| w.norm())
                .fold(agent.root_velocity.norm(), f64::max);
            if !(speed <= cfg.max_speed) {
                return Err(SimError::Diverged(format!("agent speed {speed:.3e}")));
            }
        }
        Ok(loads)
    }
}

/// Functional form of [`Simulator::step`].
pub fn step_sim(sim: &Simulator, state: &SimState, target: &ControlTarget) -> Result<(SimState, FrameLoads), SimError> {
    let mut next = state.clone();
    let loads = sim.step(&mut next, target)?;
    Ok((next, loads))
}

// ---------------------------------------------------------------------------
// Rollouts

/// Velocities and accelerations of a pose track by central differences
/// (one-sided at the ends); angular rates via the log map, world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRates {
    pub velocity: Vec<Vector3<f64>>,
    pub acceleration: Vec<Vector3<f64>>,
    pub angular_velocity: Vec<Vector3<f64>>,
    pub angular_acceleration: Vec<Vector3<f64>>,
}

fn central<T>(n: usize, h: f64, diff: impl Fn(usize, usize) -> T) -> Vec<T>
where
    T: std::ops::Div<f64, Output = T>,
{
    (0..n)
        .map(|t| {
            let (lo, hi) = (t.saturating_sub(1), (t + 1).min(n - 1));
            diff(lo, hi) / ((hi - lo) as f64 * h)
        })
        .collect()
}

pub fn trajectory_rates(traj: &ObjectTrajectory) -> TrajectoryRates {
    let n = traj.poses.len();
    if n < 2 {
        let zeros = vec![Vector3::zeros(); n];
        return TrajectoryRates {
            velocity: zeros.clone(),
            acceleration: zeros.clone(),
            angular_velocity: zeros.clone(),
            angular_acceleration: zeros,
        };
    }
    let h = 1.0 / traj.frame_rate;
    let p = &traj.poses;
    let velocity = central(n, h, |a, b| p[b].translation - p[a].translation);
    let acceleration = central(n, h, |a, b| velocity[b] - velocity[a]);
    let angular_velocity = central(n, h, |a, b| log_map(&(p[b].rotation * p[a].rotation.transpose())));
    let angular_acceleration = central(n, h, |a, b| angular_velocity[b] - angular_velocity[a]);
    TrajectoryRates {
        velocity,
        acceleration,
        angular_velocity,
        angular_acceleration,
    }
}

/// Fractional motion-frame position of control frame `c`.
fn frame_position(c: usize, control_rate: f64, frame_rate: f64, frames: usize) -> (usize, f64) {
    let u = c as f64 / control_rate * frame_rate;
    let i = (u.floor() as usize).min(frames.saturating_sub(2));
    (i, (u - i as f64).clamp(0.0, 1.0))
}

fn lerp(a: &Vector3<f64>, b: &Vector3<f64>, s: f64) -> Vector3<f64> {
    a + (b - a) * s
}

/// Control frames spanned by a motion of `frames` frames.
pub fn control_frames(frames: usize, frame_rate: f64, control_rate: f64) -> usize {
    ((frames.saturating_sub(1)) as f64 * control_rate / frame_rate).round() as usize
}

/// Interpolates a motion to control-rate PD targets.
struct TargetTrack {
    rotations: Vec<[Vec<Matrix3<f64>>; 2]>,
    /// `log(R_{t+1} R_tᵀ)` per segment.
    segments: Vec<[Vec<Vector3<f64>>; 2]>,
    roots: Vec<[Vector3<f64>; 2]>,
    frame_rate: f64,
}

impl TargetTrack {
    fn new(motion: &MotionSequence) -> Self {
        let rotations: Vec<[Vec<Matrix3<f64>>; 2]> = motion
            .frames
            .iter()
            .map(|f| [f[0].rotation_matrices(), f[1].rotation_matrices()])
            .collect();
        let segments = rotations
            .windows(2)
            .map(|w| {
                std::array::from_fn(|a| {
                    w[0][a]
                        .iter()
                        .zip(&w[1][a])
                        .map(|(r0, r1)| log_map(&(r1 * r0.transpose())))
                        .collect()
                })
            })
            .collect();
        TargetTrack {
            rotations,
            segments,
            roots: motion.frames.iter().map(|f| [f[0].gamma, f[1].gamma]).collect(),
            frame_rate: motion.frame_rate,
        }
    }

    fn target(&self, c: usize, control_rate: f64) -> Vec<AgentTarget> {
        let (i, s) = frame_position(c, control_rate, self.frame_rate, self.rotations.len());
        let fr = self.frame_rate;
        (0..2)
            .map(|a| {
                let seg = &self.segments[i][a];
                AgentTarget {
                    rotations: self.rotations[i][a]
                        .iter()
                        .zip(seg)
                        .map(|(r, w)| if s == 0.0 { *r } else { rotvec(&(w * s)) * r })
                        .collect(),
                    angular_velocities: seg.iter().map(|w| w * fr).collect(),
                    root: lerp(&self.roots[i][a], &self.roots[i + 1][a], s),
                    root_velocity: (self.roots[i + 1][a] - self.roots[i][a]) * fr,
                }
            })
            .collect()
    }
}

/// Body-frame weld targets per motion frame from contact anchors: the point
/// `p + r_wrist·n` of every active hand, mapped through the reference pose.
pub fn weld_schedule(skel: &Skeleton, contacts: &[ContactFrame], trajectory: &ObjectTrajectory) -> Vec<Vec<Weld>> {
    contacts
        .iter()
        .zip(&trajectory.poses)
        .map(|(frame, pose)| {
            let mut welds = Vec::new();
            for (a, hands) in frame.anchors.iter().enumerate() {
                for (hand, anchor) in hands.iter().enumerate() {
                    if !anchor.s {
                        continue;
                    }
                    let r = skel.joints[skel.wrist_joints[hand]].radius;
                    welds.push(Weld {
                        agent: a,
                        hand,
                        point: pose.to_body(&(anchor.p + anchor.n * r)),
                        normal: pose.rotation.transpose() * anchor.n,
                    });
                }
            }
            welds
        })
        .collect()
}

/// Anchors read off a motion: a hand is in contact when its wrist sphere is
/// within `max_gap` of the surface; the anchor is the closest surface point.
pub fn anchors_from_motion(
    skel: &Skeleton,
    motion: &MotionSequence,
    object: &ObjectSpec,
    trajectory: &ObjectTrajectory,
    max_gap: f64,
) -> Result<Vec<ContactFrame>, SimError> {
    let joints = motion.joint_positions(skel)?;
    Ok(joints
        .iter()
        .zip(&trajectory.poses)
        .map(|(frame, pose)| ContactFrame {
            anchors: std::array::from_fn(|a| {
                std::array::from_fn(|hand| {
                    let j = skel.wrist_joints[hand];
                    let w = frame[a][j];
                    let gap = object.signed_distance(pose, &w) - skel.joints[j].radius;
                    let n = object.sdf_gradient(pose, &w);
                    ContactAnchor {
                        p: object.project_to_surface(pose, &w),
                        n: if n.norm() > 0.0 { n.normalize() } else { Vector3::z() },
                        delta: Vector3::zeros(),
                        s: gap <= max_gap,
                    }
                })
            }),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Simulated agents sampled at the motion frame times.
    pub motion: MotionSequence,
    pub object: ObjectTrajectory,
    /// One entry per control frame.
    pub loads: Vec<FrameLoads>,
    pub control_rate: f64,
}

impl Rollout {
    /// Per-control-frame loads as CSV.
    pub fn loads_csv(&self) -> String {
        let mut out = String::from("frame,time,fx,fy,fz,mx,my,mz,margin\n");
        for (c, l) in self.loads.iter().enumerate() {
            out.push_str(&format!(
                "{c},{},{},{},{},{},{},{},{}\n",
                c as f64 / self.control_rate,
                l.force.x,
                l.force.y,
                l.force.z,
                l.torque.x,
                l.torque.y,
                l.torque.z,
                l.margin
            ));
        }
        out
    }
}

fn snapshot(state: &SimState, beta: [[f64; SHAPE_DIM]; 2]) -> [crate::kinematics::AgentPose; 2] {
    std::array::from_fn(|a| crate::kinematics::AgentPose {
        theta: state.agents[a].rotations.iter().map(Rot6D::from_matrix).collect(),
        beta: beta[a],
        gamma: state.agents[a].root,
    })
}

/// Tracks `targets` with both agents while the object starts on
/// `trajectory`'s first pose and velocity. `welds` holds one list per motion
/// frame.
pub fn simulate(
    sim: &Simulator,
    targets: &MotionSequence,
    trajectory: &ObjectTrajectory,
    welds: &[Vec<Weld>],
) -> Result<Rollout, SimError> {
    targets.validate(sim.skel)?;
    let frames = targets.len();
    if trajectory.len() != frames || welds.len() != frames {
        return Err(SimError::ShapeMismatch {
            expected: frames,
            got: if trajectory.len() != frames { trajectory.len() } else { welds.len() },
        });
    }
    if sim.object.is_none() {
        return Err(SimError::InvalidConfig("rollouts need an object".into()));
    }
    let ctrl = sim.cfg.control_rate;
    let fr = targets.frame_rate;
    let track = TargetTrack::new(targets);
    let rates = trajectory_rates(trajectory);
    let first = track.target(0, ctrl);
    // start with the first frame's welds already carrying the weight
    let sag = if welds[0].is_empty() || sim.cfg.contact_stiffness == 0.0 {
        Vector3::zeros()
    } else {
        sim.cfg.gravity() * (sim.object.unwrap().mass / (welds[0].len() as f64 * sim.cfg.contact_stiffness))
    };
    let mut state = SimState {
        agents: first
            .iter()
            .enumerate()
            .map(|(a, t)| AgentState {
                rotations: t.rotations.clone(),
                angular_velocities: t.angular_velocities.clone(),
                root: t.root,
                root_velocity: t.root_velocity,
                beta: targets.frames[0][a].beta,
                grips: [false; 2],
            })
            .collect(),
        object: Some(ObjectState {
            rotation: trajectory.poses[0].rotation,
            translation: trajectory.poses[0].translation + sag,
            velocity: rates.velocity[0],
            angular_velocity: rates.angular_velocity[0],
        }),
    };
    let beta = [targets.frames[0][0].beta, targets.frames[0][1].beta];
    let steps = control_frames(frames, fr, ctrl);
    let snap_at: Vec<usize> = (0..frames)
        .map(|t| ((t as f64 * ctrl / fr).round() as usize).min(steps))
        .collect();
    let mut out_frames = Vec::with_capacity(frames);
    let mut poses = Vec::with_capacity(frames);
    let mut loads = Vec::with_capacity(steps);
    let mut next = 0;
    for c in 0..=steps {
        while next < frames && snap_at[next] == c {
            out_frames.push(snapshot(&state, beta));
            poses.push(state.object.as_ref().unwrap().pose());
            next += 1;
        }
        if c == steps {
            break;
        }
        let frame = ((c as f64 / ctrl * fr).round() as usize).min(frames - 1);
        let target = ControlTarget {
            agents: track.target(c, ctrl),
            welds: welds[frame].clone(),
        };
        loads.push(sim.step(&mut state, &target)?);
    }
    Ok(Rollout {
        motion: MotionSequence {
            frames: out_frames,
            frame_rate: fr,
        },
        object: ObjectTrajectory {
            poses,
            frame_rate: trajectory.frame_rate,
        },
        loads,
        control_rate: ctrl,
    })
}

// ---------------------------------------------------------------------------
// Cost

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Tracking of agents and object.
    pub similarity: f64,
    /// Mean `‖f − M a‖² / ‖M g‖²`.
    pub force: f64,
    /// Mean `‖μ − I α‖² / ‖I α‖²`, or `‖μ‖²` where `‖I α‖` is tiny.
    pub torque: f64,
    /// Mean `exp(−m)`.
    pub margin: f64,
    pub total: f64,
}

fn rot6d_of(m: &Matrix3<f64>) -> [f64; 6] {
    Rot6D::from_matrix(m).0
}

/// Physical cost of a rollout against the reference motion and object track.
pub fn phys_cost(
    rollout: &Rollout,
    reference: &MotionSequence,
    trajectory: &ObjectTrajectory,
    object: &ObjectSpec,
    gravity: Vector3<f64>,
) -> Result<CostBreakdown, SimError> {
    let frames = reference.len();
    if rollout.motion.len() != frames || rollout.object.len() != frames || trajectory.len() != frames {
        return Err(SimError::ShapeMismatch {
            expected: frames,
            got: rollout.motion.len().min(rollout.object.len()).min(trajectory.len()),
        });
    }
    let mut similarity = 0.0;
    for t in 0..frames {
        for a in 0..2 {
            let sim = &rollout.motion.frames[t][a];
            let re = &reference.frames[t][a];
            for (x, y) in sim.theta.iter().zip(&re.theta) {
                let xs = rot6d_of(&x.to_matrix_or_identity());
                let ys = rot6d_of(&y.to_matrix_or_identity());
                similarity += xs.iter().zip(&ys).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
            }
            similarity += (sim.gamma - re.gamma).norm_squared();
        }
        let (p, q) = (&rollout.object.poses[t], &trajectory.poses[t]);
        similarity += (p.rotation - q.rotation).norm_squared() + (p.translation - q.translation).norm_squared();
    }
    similarity /= frames.max(1) as f64;

    let rates = trajectory_rates(trajectory);
    let mass = object.mass;
    let weight = (gravity * mass).norm_squared();
    let inertia = object.inertia_matrix();
    let (mut force, mut torque, mut margin) = (0.0, 0.0, 0.0);
    for (c, l) in rollout.loads.iter().enumerate() {
        let (i, s) = frame_position(c, rollout.control_rate, trajectory.frame_rate, frames);
        let a = lerp(&rates.acceleration[i], &rates.acceleration[(i + 1).min(frames - 1)], s);
        let alpha = lerp(
            &rates.angular_acceleration[i],
            &rates.angular_acceleration[(i + 1).min(frames - 1)],
            s,
        );
        let r = trajectory.poses[if s < 0.5 { i } else { (i + 1).min(frames - 1) }].rotation;
        let i_alpha = r * inertia * r.transpose() * alpha;
        force += (l.force - a * mass).norm_squared() / weight.max(f64::MIN_POSITIVE);
        torque += if i_alpha.norm() < 1e-6 {
            l.torque.norm_squared()
        } else {
            (l.torque - i_alpha).norm_squared() / i_alpha.norm_squared()
        };
        margin += (-l.margin).exp();
    }
    let n = rollout.loads.len().max(1) as f64;
    let (force, torque, margin) = (force / n, torque / n, margin / n);
    Ok(CostBreakdown {
        similarity,
        force,
        torque,
        margin,
        total: similarity + force + torque + margin,
    })
}

// ---------------------------------------------------------------------------
// Refinement

/// Offsets on root translations and arm-chain joints of both agents at a
/// few knots, linearly interpolated over frames.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetSpace {
    pub joints: Vec<usize>,
    pub knots: Vec<usize>,
    pub frames: usize,
    /// Meters of root translation per unit of search coordinate.
    pub translation_scale: f64,
    /// Radians of joint rotation per unit of search coordinate.
    pub rotation_scale: f64,
}

impl OffsetSpace {
    /// Arm chains are the joints above each wrist that are not shared with
    /// the other arm; `⌈frames/spacing⌉` knots.
    pub fn new(skel: &Skeleton, frames: usize, spacing: usize) -> Result<Self, SimError> {
        Self::with_scales(skel, frames, spacing, 1.0, 1.0)
    }

    pub fn with_scales(
        skel: &Skeleton,
        frames: usize,
        spacing: usize,
        translation_scale: f64,
        rotation_scale: f64,
    ) -> Result<Self, SimError> {
        if frames == 0 || spacing == 0 {
            return Err(SimError::InvalidConfig("need frames and a positive knot spacing".into()));
        }
        let [l, r] = skel.wrist_joints;
        let (cl, cr) = (skel.chain_to(l), skel.chain_to(r));
        let mut joints: Vec<usize> = cl.iter().filter(|j| !cr.contains(j) && **j != l).copied().collect();
        joints.extend(cr.iter().filter(|j| !cl.contains(j) && **j != r));
        let count = frames.div_ceil(spacing);
        let knots = if count == 1 {
            vec![0]
        } else {
            (0..count)
                .map(|k| ((k * (frames - 1)) as f64 / (count - 1) as f64).round() as usize)
                .collect()
        };
        Ok(OffsetSpace {
            joints,
            knots,
            frames,
            translation_scale,
            rotation_scale,
        })
    }

    pub fn per_knot(&self) -> usize {
        2 * (3 + 3 * self.joints.len())
    }

    pub fn dim(&self) -> usize {
        self.knots.len() * self.per_knot()
    }

    fn at_frame(&self, theta: &[f64], t: usize) -> Vec<f64> {
        let w = self.per_knot();
        let knot = |k: usize| &theta[k * w..(k + 1) * w];
        if self.knots.len() == 1 {
            return knot(0).to_vec();
        }
        let k = self.knots.windows(2).position(|s| t <= s[1]).unwrap_or(self.knots.len() - 2);
        let (t0, t1) = (self.knots[k], self.knots[k + 1]);
        let s = if t1 > t0 { ((t as f64 - t0 as f64) / (t1 - t0) as f64).clamp(0.0, 1.0) } else { 0.0 };
        knot(k).iter().zip(knot(k + 1)).map(|(a, b)| a + (b - a) * s).collect()
    }

    /// `motion` with the offsets `theta` applied: translations add, rotations
    /// are pre-multiplied by the exponential of the offset.
    pub fn apply(&self, motion: &MotionSequence, theta: &[f64]) -> Result<MotionSequence, SimError> {
        if theta.len() != self.dim() {
            return Err(SimError::ShapeMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        if motion.len() != self.frames {
            return Err(SimError::ShapeMismatch {
                expected: self.frames,
                got: motion.len(),
            });
        }
        let mut out = motion.clone();
        let half = self.per_knot() / 2;
        for (t, frame) in out.frames.iter_mut().enumerate() {
            let d = self.at_frame(theta, t);
            for (a, pose) in frame.iter_mut().enumerate() {
                let d = &d[a * half..(a + 1) * half];
                pose.gamma += Vector3::new(d[0], d[1], d[2]) * self.translation_scale;
                for (i, &j) in self.joints.iter().enumerate() {
                    let v = Vector3::new(d[3 + 3 * i], d[4 + 3 * i], d[5 + 3 * i]) * self.rotation_scale;
                    let r = rotvec(&v) * pose.theta[j].to_matrix_or_identity();
                    pose.theta[j] = Rot6D::from_matrix(&r);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub sim: SimConfig,
    pub cma: CmaConfig,
    /// Rollout evaluations.
    pub budget: usize,
    /// Frames per offset knot.
    pub knot_spacing: usize,
    /// Offset units: meters and radians per search coordinate.
    pub translation_scale: f64,
    pub rotation_scale: f64,
    /// Wrist-surface gap below which a hand counts as holding, when anchors
    /// are read off the motion.
    pub anchor_gap: f64,
    /// Fraction of diverged samples above which the hook gives up.
    pub divergence_limit: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            sim: SimConfig::default(),
            cma: CmaConfig::default(),
            budget: 3200,
            knot_spacing: 8,
            translation_scale: 0.1,
            rotation_scale: 0.1,
            anchor_gap: 0.1,
            divergence_limit: 0.9,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.sim.validate()?;
        self.cma.validate()?;
        if self.budget < self.cma.lambda {
            return Err(SimError::InvalidConfig(format!(
                "budget {} is below one population of {}",
                self.budget, self.cma.lambda
            )));
        }
        if !(self.translation_scale > 0.0 && self.rotation_scale > 0.0) {
            return Err(SimError::InvalidConfig("offset scales must be positive".into()));
        }
        if self.knot_spacing == 0 || !(self.anchor_gap >= 0.0) || !(0.0..=1.0).contains(&self.divergence_limit) {
            return Err(SimError::InvalidConfig("bad knot spacing, anchor gap or divergence limit".into()));
        }
        Ok(())
    }
}

/// Object, its track and (optionally) the hand anchors, in the motion's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineScene {
    pub skeleton: Skeleton,
    pub object: ObjectSpec,
    pub trajectory: ObjectTrajectory,
    /// Read off the motion when absent.
    pub contacts: Option<Vec<ContactFrame>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub motion: MotionSequence,
    pub rollout: Rollout,
    pub cost: CostBreakdown,
    /// Cost of simulating the unmodified motion.
    pub initial_cost: f64,
    pub search: CmaResult,
    pub diverged_fraction: f64,
}

/// Searches target offsets that make the simulated rollout of `reference`
/// cheapest and returns that rollout.
pub fn refine_motion(reference: &MotionSequence, scene: &RefineScene, cfg: &RefineConfig) -> Result<Refinement, SimError> {
    cfg.validate()?;
    reference.validate(&scene.skeleton)?;
    let sim = Simulator::new(&cfg.sim, &scene.skeleton, Some(&scene.object))?;
    let contacts = match &scene.contacts {
        Some(c) => c.clone(),
        None => anchors_from_motion(&scene.skeleton, reference, &scene.object, &scene.trajectory, cfg.anchor_gap)?,
    };
    if contacts.len() != reference.len() {
        return Err(SimError::ShapeMismatch {
            expected: reference.len(),
            got: contacts.len(),
        });
    }
    let welds = weld_schedule(&scene.skeleton, &contacts, &scene.trajectory);
    let space = OffsetSpace::with_scales(
        &scene.skeleton,
        reference.len(),
        cfg.knot_spacing,
        cfg.translation_scale,
        cfg.rotation_scale,
    )?;
    let g = cfg.sim.gravity();
    let run = |theta: &[f64]| -> Result<(MotionSequence, Rollout, CostBreakdown), SimError> {
        let targets = space.apply(reference, theta)?;
        let rollout = simulate(&sim, &targets, &scene.trajectory, &welds)?;
        let cost = phys_cost(&rollout, reference, &scene.trajectory, &scene.object, g)?;
        Ok((targets, rollout, cost))
    };
    let cost_of = |theta: &[f64]| match run(theta) {
        Ok((_, _, c)) if c.total.is_finite() => c.total,
        _ => f64::INFINITY,
    };
    let zero = vec![0.0; space.dim()];
    let initial_cost = cost_of(&zero);
    let search = cma_minimize(cost_of, zero, &cfg.cma, cfg.budget)?;
    let diverged_fraction = search.rejected as f64 / search.evaluations.max(1) as f64;
    if !search.best_cost.is_finite() {
        return Err(SimError::Diverged(format!("all {} samples diverged", search.evaluations)));
    }
    let (_, rollout, cost) = run(&search.best)?;
    Ok(Refinement {
        motion: rollout.motion.clone(),
        rollout,
        cost,
        initial_cost,
        search,
        diverged_fraction,
    })
}

/// Refines the motion encoded in `state` and returns the best rollout
/// re-encoded at the same flow time.
pub fn cma_refine(
    state: &FlowState,
    layout: &FlowLayout,
    scene: &RefineScene,
    cfg: &RefineConfig,
) -> Result<(FlowState, Refinement), SimError> {
    let motion = decode(layout, &state.x)?;
    let refined = refine_motion(&motion, scene, cfg)?;
    let mut out = encode(&refined.motion, layout.joints)?;
    out.tau = state.tau;
    Ok((out, refined))
}

/// Sampler hook that refines the motion before the last Euler step.
///
/// At that step the state `x_τ` is split into the model's clean estimate
/// `x̂1 = x_τ + (1−τ)v` and noise estimate `x̂0 = x_τ − τv`; `x̂1` is refined
/// and the state becomes `τ·x̃ + (1−τ)·x̂0`, so an unchanged motion leaves the
/// state unchanged.
pub struct SimulationHook<'m> {
    model: &'m FlowModel,
    features: Vec<f64>,
    scene: RefineScene,
    cfg: RefineConfig,
    /// Outcome of the last refinement.
    pub last: Option<Refinement>,
    /// Why the last firing passed the state through, if it did.
    pub skipped: Option<String>,
}

impl<'m> SimulationHook<'m> {
    pub fn new(model: &'m FlowModel, features: Vec<f64>, scene: RefineScene, cfg: RefineConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        Ok(SimulationHook {
            model,
            features,
            scene,
            cfg,
            last: None,
            skipped: None,
        })
    }

    fn pass(&mut self, why: String) {
        log::warn!("simulation hook passed the state through: {why}");
        self.skipped = Some(why);
    }
}

impl Guidance for SimulationHook<'_> {
    fn name(&self) -> &str {
        "simulation"
    }

    fn replace_state(&mut self, step: usize, steps: usize, state: &mut FlowState) -> Result<(), String> {
        if step + 1 != steps {
            return Ok(());
        }
        self.last = None;
        self.skipped = None;
        let tau = state.tau;
        let v = self
            .model
            .velocity(&state.x, tau, &self.features)
            .map_err(|e| e.to_string())?;
        let clean: Vec<f64> = state.x.iter().zip(&v).map(|(x, v)| x + (1.0 - tau) * v).collect();
        let layout = &self.model.layout;
        let motion = decode(layout, &clean).map_err(|e| e.to_string())?;
        match refine_motion(&motion, &self.scene, &self.cfg) {
            Ok(r) if r.diverged_fraction > self.cfg.divergence_limit => {
                self.pass(format!("{:.0}% of samples diverged", 100.0 * r.diverged_fraction));
            }
            Ok(r) => {
                let refined = encode(&r.motion, layout.joints).map_err(|e| e.to_string())?;
                for ((x, r), v) in state.x.iter_mut().zip(&refined.x).zip(&v) {
                    let noise = *x - tau * v;
                    *x = tau * r + (1.0 - tau) * noise;
                }
                self.last = Some(r);
            }
            Err(SimError::Diverged(why)) => self.pass(why),
            Err(e) => return Err(e.to_string()),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowgen::{canonicalize, ConditionConfig};
    use crate::geometry::Primitive;
    use crate::kinematics::{rotvec_to_matrix, AgentPose};
    use crate::synthdata::{generate_episode, Episode, EpisodeParams, PathFamily};
    use proptest::prelude::*;

    fn skel() -> Skeleton {
        Skeleton::default_21()
    }

    fn ball(mass: f64) -> ObjectSpec {
        ObjectSpec::uniform(Primitive::Box { half_extents: [0.2, 0.15, 0.1] }, mass).unwrap()
    }

    fn short_episode(seed: u64, path: PathFamily) -> Episode {
        let params = EpisodeParams {
            frames: 16,
            frame_rate: 20.0,
            path: Some(path),
            ..Default::default()
        };
        canonicalize(&generate_episode(seed, &params).unwrap())
    }

    fn posed_agent(skel: &Skeleton, seed: u64) -> AgentState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AgentState {
            rotations: (0..skel.joint_count())
                .map(|_| rotvec_to_matrix(&Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5))))
                .collect(),
            angular_velocities: vec![Vector3::zeros(); skel.joint_count()],
            root: Vector3::new(3.0, -2.0, 0.9),
            root_velocity: Vector3::zeros(),
            beta: [0.0; SHAPE_DIM],
            grips: [false; 2],
        }
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn free_fall_matches_parabola() {
        let (cfg, s, obj) = (SimConfig::default(), skel(), ball(3.0));
        let sim = Simulator::new(&cfg, &s, Some(&obj)).unwrap();
        let z0 = 20.0;
        let mut state = SimState {
            agents: Vec::new(),
            object: Some(ObjectState::at_rest(&Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, z0)))),
        };
        let target = ControlTarget {
            agents: Vec::new(),
            welds: Vec::new(),
        };
        for c in 1..=60 {
            let loads = sim.step(&mut state, &target).unwrap();
            let t = c as f64 / 60.0;
            let z = state.object.as_ref().unwrap().translation.z;
            assert!((z - (z0 - 0.5 * 9.81 * t * t)).abs() < 1e-3, "t {t}: {z}");
            assert!((loads.force - Vector3::new(0.0, 0.0, -9.81 * 3.0)).norm() < 1e-12);
            assert_eq!(loads.margin, 0.0);
        }
    }

    #[test]
    fn free_body_momentum_changes_by_weight_impulse() {
        let cfg = SimConfig {
            control_rate: 240.0,
            ..Default::default()
        };
        let (s, obj) = (skel(), ball(7.5));
        let sim = Simulator::new(&cfg, &s, Some(&obj)).unwrap();
        let mut state = SimState {
            agents: Vec::new(),
            object: Some(ObjectState {
                velocity: Vector3::new(0.3, -1.0, 2.0),
                angular_velocity: Vector3::new(0.5, 0.1, -0.2),
                ..ObjectState::at_rest(&Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 50.0)))
            }),
        };
        let target = ControlTarget {
            agents: Vec::new(),
            welds: Vec::new(),
        };
        let impulse = Vector3::new(0.0, 0.0, -9.81) * 7.5 / 240.0;
        for _ in 0..240 {
            let before = state.object.as_ref().unwrap().velocity * 7.5;
            sim.step(&mut state, &target).unwrap();
            let after = state.object.as_ref().unwrap().velocity * 7.5;
            assert!((after - before - impulse).norm() < 1e-12);
            let r = state.object.as_ref().unwrap().rotation;
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pd_fixed_point_leaves_state_unchanged() {
        let (cfg, s) = (SimConfig::default(), skel());
        let sim = Simulator::new(&cfg, &s, None).unwrap();
        let agent = posed_agent(&s, 4);
        let mut state = SimState {
            agents: vec![agent.clone()],
            object: None,
        };
        let target = ControlTarget {
            agents: vec![AgentTarget::hold(&agent)],
            welds: Vec::new(),
        };
        for _ in 0..30 {
            let loads = sim.step(&mut state, &target).unwrap();
            assert_eq!(loads, FrameLoads::default());
        }
        assert_eq!(state.agents[0], agent);
    }

    #[test]
    fn pd_step_response_settles() {
        let (cfg, s) = (SimConfig::default(), skel());
        let sim = Simulator::new(&cfg, &s, None).unwrap();
        let agent = posed_agent(&s, 8);
        let mut target = AgentTarget::hold(&agent);
        let joint = 10;
        let step = Vector3::new(0.3, -0.2, 0.35);
        target.rotations[joint] = rotvec_to_matrix(&step) * agent.rotations[joint];
        let mut state = SimState {
            agents: vec![agent.clone()],
            object: None,
        };
        let target = ControlTarget {
            agents: vec![target],
            welds: Vec::new(),
        };
        let size = step.norm();
        let mut errors = Vec::new();
        for _ in 0..120 {
            sim.step(&mut state, &target).unwrap();
            let r = state.agents[0].rotations[joint];
            errors.push(log_map(&(target.agents[0].rotations[joint] * r.transpose())).norm());
        }
        // settled after half a second and stays there
        assert!(errors[30..].iter().all(|e| *e < 0.02 * size), "{:?}", &errors[25..35]);
        // other joints never move
        for j in (0..s.joint_count()).filter(|&j| j != joint) {
            assert_eq!(state.agents[0].rotations[j], agent.rotations[j]);
        }
    }

    #[test]
    fn static_hold_balances_weight() {
        let s = skel();
        let ep = {
            let params = EpisodeParams {
                frames: 60,
                frame_rate: 20.0,
                path: Some(PathFamily::Stationary),
                ..Default::default()
            };
            canonicalize(&generate_episode(1, &params).unwrap())
        };
        let cfg = SimConfig::default();
        let sim = Simulator::new(&cfg, &s, Some(&ep.object)).unwrap();
        let welds = weld_schedule(&s, &ep.contacts, &ep.trajectory);
        assert!(welds[0].len() >= 2);
        let r = simulate(&sim, &ep.motion, &ep.trajectory, &welds).unwrap();
        let weight = ep.object.mass * 9.81;
        // the reference object is at rest, so M a = 0 after settling
        for l in &r.loads[60..] {
            assert!(l.force.norm() < 0.02 * weight, "{}", l.force.norm() / weight);
        }
        let last = r.object.poses.last().unwrap();
        assert!((last.translation - ep.trajectory.poses[0].translation).norm() < 0.05);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = SimConfig {
            max_speed: 1.0,
            ..Default::default()
        };
        let (s, obj) = (skel(), ball(1.0));
        let sim = Simulator::new(&cfg, &s, Some(&obj)).unwrap();
        let mut state = SimState {
            agents: Vec::new(),
            object: Some(ObjectState::at_rest(&Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 100.0)))),
        };
        let target = ControlTarget {
            agents: Vec::new(),
            welds: Vec::new(),
        };
        let err = (0..100).find_map(|_| sim.step(&mut state, &target).err());
        assert!(matches!(err, Some(SimError::Diverged(_))));
    }

    #[test]
    fn config_validation() {
        let ok = SimConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!(ok.substeps(), 4);
        let bad_rate = SimConfig {
            control_rate: 70.0,
            ..ok.clone()
        };
        assert!(bad_rate.validate().is_err());
        let bad_gain = SimConfig {
            joint_gain: PdGain { kp: 0.0, kd: 1.0 },
            ..ok.clone()
        };
        assert!(bad_gain.validate().is_err());
        let s = skel();
        let wrong_len = SimConfig {
            joint_gains: vec![PdGain { kp: 1.0, kd: 1.0 }; 3],
            ..ok
        };
        assert!(Simulator::new(&wrong_len, &s, None).is_err());
    }

    #[test]
    fn log_map_inverts_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let v = Vector3::from_fn(|_, _| rng.gen_range(-1.7..1.7));
            assert!((log_map(&rotvec(&v)) - v).norm() < 1e-9);
        }
        assert_eq!(log_map(&Matrix3::identity()), Vector3::zeros());
        let near_pi = Vector3::new(0.0, 3.1, 0.2);
        assert!((log_map(&rotvec(&near_pi)) - near_pi).norm() < 1e-9);
        // slightly non-orthonormal input stays finite
        let m = Matrix3::identity() * (1.0 + 1e-15);
        assert!(log_map(&m).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn trajectory_rates_match_analytic_motion() {
        let (w, a) = (0.7, Vector3::new(0.2, -0.1, 0.4));
        let fr = 30.0;
        let traj = ObjectTrajectory {
            poses: (0..20)
                .map(|t| {
                    let s = t as f64 / fr;
                    Pose::new(rotvec(&Vector3::new(0.0, 0.0, w * s)), a * (0.5 * s * s))
                })
                .collect(),
            frame_rate: fr,
        };
        let r = trajectory_rates(&traj);
        for t in 2..18 {
            let s = t as f64 / fr;
            assert!((r.velocity[t] - a * s).norm() < 1e-9);
            assert!((r.acceleration[t] - a).norm() < 1e-9);
            assert!((r.angular_velocity[t] - Vector3::new(0.0, 0.0, w)).norm() < 1e-9);
            assert!(r.angular_acceleration[t].norm() < 1e-9);
        }
    }

    fn perfect_rollout(ep: &Episode, margin: f64) -> Rollout {
        let steps = control_frames(ep.motion.len(), ep.motion.frame_rate, 60.0);
        Rollout {
            motion: ep.motion.clone(),
            object: ep.trajectory.clone(),
            loads: vec![
                FrameLoads {
                    force: Vector3::zeros(),
                    torque: Vector3::zeros(),
                    margin,
                };
                steps
            ],
            control_rate: 60.0,
        }
    }

    #[test]
    fn cost_of_perfect_static_hold_is_the_margin_term() {
        let ep = short_episode(3, PathFamily::Stationary);
        let g = Vector3::new(0.0, 0.0, -9.81);
        let c = phys_cost(&perfect_rollout(&ep, 50.0), &ep.motion, &ep.trajectory, &ep.object, g).unwrap();
        assert_eq!(c.similarity, 0.0);
        assert_eq!(c.force, 0.0);
        assert_eq!(c.torque, 0.0);
        assert!(c.margin < 1e-20);
        let weak = phys_cost(&perfect_rollout(&ep, 0.0), &ep.motion, &ep.trajectory, &ep.object, g).unwrap();
        assert_eq!(weak.margin, 1.0);
    }

    #[test]
    fn displaced_object_costs_its_squared_offset() {
        let ep = short_episode(3, PathFamily::Stationary);
        let mut r = perfect_rollout(&ep, 50.0);
        for p in &mut r.object.poses {
            p.translation.x += 0.1;
        }
        let c = phys_cost(&r, &ep.motion, &ep.trajectory, &ep.object, Vector3::new(0.0, 0.0, -9.81)).unwrap();
        assert!((c.similarity - 0.01).abs() < 1e-12);
    }

    #[test]
    fn unbalanced_force_is_measured_against_weight() {
        let ep = short_episode(3, PathFamily::Stationary);
        let mut r = perfect_rollout(&ep, 50.0);
        let weight = ep.object.mass * 9.81;
        for l in &mut r.loads {
            l.force = Vector3::new(0.0, 0.0, -weight);
            l.torque = Vector3::new(0.0, 0.3, 0.0);
        }
        let c = phys_cost(&r, &ep.motion, &ep.trajectory, &ep.object, Vector3::new(0.0, 0.0, -9.81)).unwrap();
        assert!((c.force - 1.0).abs() < 1e-12);
        // no reference rotation: the torque term is the absolute residual
        assert!((c.torque - 0.09).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn cost_is_non_negative(dx in -0.2f64..0.2, dr in -0.3f64..0.3, f in -50.0f64..50.0, m in 0.0f64..3.0) {
            let ep = short_episode(5, PathFamily::Line);
            let mut r = perfect_rollout(&ep, m);
            for (t, frame) in r.motion.frames.iter_mut().enumerate() {
                frame[0].gamma.y += dx * t as f64 / 16.0;
                let rot = rotvec(&Vector3::new(dr, 0.0, 0.0)) * frame[1].theta[6].to_matrix_or_identity();
                frame[1].theta[6] = Rot6D::from_matrix(&rot);
            }
            for l in &mut r.loads {
                l.force.x = f;
            }
            let c = phys_cost(&r, &ep.motion, &ep.trajectory, &ep.object, Vector3::new(0.0, 0.0, -9.81)).unwrap();
            prop_assert!(c.similarity >= 0.0 && c.force >= 0.0 && c.torque >= 0.0 && c.margin > 0.0);
            prop_assert_eq!(c.similarity == 0.0, dx == 0.0 && dr == 0.0);
        }
    }

    #[test]
    fn offset_space_layout_and_interpolation() {
        let s = skel();
        let space = OffsetSpace::new(&s, 64, 8).unwrap();
        assert_eq!(space.joints, vec![5, 6, 7, 9, 10, 11]);
        assert_eq!(space.knots.len(), 8);
        assert_eq!((space.knots[0], *space.knots.last().unwrap()), (0, 63));
        assert_eq!(space.per_knot(), 42);
        assert_eq!(space.dim(), 336);

        let ep = short_episode(2, PathFamily::Line);
        let space = OffsetSpace::new(&s, 16, 8).unwrap();
        assert_eq!(space.knots, vec![0, 15]);
        assert_eq!(space.apply(&ep.motion, &vec![0.0; space.dim()]).unwrap().frames.len(), 16);
        let unchanged = space.apply(&ep.motion, &vec![0.0; space.dim()]).unwrap();
        for (a, b) in unchanged.frames.iter().zip(&ep.motion.frames) {
            for (p, q) in a.iter().zip(b) {
                assert_eq!(p.gamma, q.gamma);
                for (x, y) in p.theta.iter().zip(&q.theta) {
                    assert!((x.to_matrix_or_identity() - y.to_matrix_or_identity()).norm() < 1e-12);
                }
            }
        }
        // agent 1 root z offset rises linearly from 0 to 0.3
        let mut theta = vec![0.0; space.dim()];
        theta[space.per_knot() + space.per_knot() / 2 + 2] = 0.3;
        let moved = space.apply(&ep.motion, &theta).unwrap();
        for t in 0..16 {
            let dz = moved.frames[t][1].gamma.z - ep.motion.frames[t][1].gamma.z;
            assert!((dz - 0.3 * t as f64 / 15.0).abs() < 1e-12);
            assert_eq!(moved.frames[t][0].gamma, ep.motion.frames[t][0].gamma);
        }
        assert!(space.apply(&ep.motion, &[0.0; 3]).is_err());
    }

    #[test]
    fn anchors_read_from_motion_match_episode_contacts() {
        let s = skel();
        let ep = short_episode(7, PathFamily::Line);
        let read = anchors_from_motion(&s, &ep.motion, &ep.object, &ep.trajectory, 0.02).unwrap();
        for (a, b) in read.iter().zip(&ep.contacts) {
            for (x, y) in a.anchors.iter().flatten().zip(b.anchors.iter().flatten()) {
                assert_eq!(x.s, y.s);
                if y.s {
                    assert!((x.p - y.p).norm() < 5e-3);
                }
            }
        }
    }

    fn small_refine(budget: usize) -> RefineConfig {
        RefineConfig {
            budget,
            cma: CmaConfig {
                seed: 5,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn scene_of(ep: &Episode) -> RefineScene {
        RefineScene {
            skeleton: skel(),
            object: ep.object.clone(),
            trajectory: ep.trajectory.clone(),
            contacts: Some(ep.contacts.clone()),
        }
    }

    #[test]
    fn refinement_is_deterministic_and_monotone() {
        let ep = short_episode(11, PathFamily::Line);
        let scene = scene_of(&ep);
        let a = refine_motion(&ep.motion, &scene, &small_refine(64)).unwrap();
        let b = refine_motion(&ep.motion, &scene, &small_refine(64)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.search.evaluations, 64);
        assert!(a.search.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(a.cost.total, a.search.best_cost);
        assert_eq!(a.motion.len(), 16);
        let one = refine_motion(&ep.motion, &scene, &small_refine(16)).unwrap();
        assert_eq!(one.search.evaluations, 16);
        assert!(refine_motion(&ep.motion, &scene, &small_refine(15)).is_err());
    }

    #[test]
    fn cma_refine_keeps_flow_time() {
        let ep = short_episode(11, PathFamily::Line);
        let mut state = encode(&ep.motion, 21).unwrap();
        state.tau = 0.9;
        let layout = FlowLayout::new(16, 21, 20.0);
        let (out, r) = cma_refine(&state, &layout, &scene_of(&ep), &small_refine(16)).unwrap();
        assert_eq!(out.tau, 0.9);
        assert_eq!(out.x, encode(&r.motion, 21).unwrap().x);
    }

    #[test]
    fn floating_hands_are_pulled_into_contact() {
        let s = skel();
        let ep = short_episode(21, PathFamily::Line);
        // back each agent off so its wrists float 5 cm from the surface
        let mut floating = ep.motion.clone();
        let joints = ep.motion.joint_positions(&s).unwrap();
        for (t, frame) in floating.frames.iter_mut().enumerate() {
            for (a, pose) in frame.iter_mut().enumerate() {
                let wrists = s.wrist_joints.map(|j| joints[t][a][j]);
                let mid = (wrists[0] + wrists[1]) * 0.5;
                let mut away = mid - ep.trajectory.poses[t].translation;
                away.z = 0.0;
                pose.gamma += away.normalize() * 0.042;
            }
        }
        let scene = scene_of(&ep);
        let cfg = RefineConfig {
            budget: 800,
            ..Default::default()
        };
        let r = refine_motion(&floating, &scene, &cfg).unwrap();
        assert!(r.cost.total < r.initial_cost);
        let welds = weld_schedule(&s, &ep.contacts, &ep.trajectory);
        let sim_joints = r.motion.joint_positions(&s).unwrap();
        for (t, ws) in welds.iter().enumerate() {
            let pose = &r.rollout.object.poses[t];
            assert!((pose.translation - ep.trajectory.poses[t].translation).norm() < 0.05);
            for w in ws {
                let d = (sim_joints[t][w.agent][s.wrist_joints[w.hand]] - pose.to_world(&w.point)).norm();
                assert!(d <= cfg.sim.attach_radius, "frame {t}: {d}");
            }
            let radii = s.radii();
            for a in 0..2 {
                let pen = crate::geometry::penetration_depth(&sim_joints[t][a], &radii, &ep.object, pose);
                assert!(pen < 1e-3, "{pen}");
            }
        }
        assert!(r.rollout.loads_csv().lines().count() == r.rollout.loads.len() + 1);
    }

    fn hook_fixture() -> (Episode, FlowModel, Vec<f64>) {
        let ep = short_episode(11, PathFamily::Line);
        let layout = FlowLayout::new(16, 21, 20.0);
        let cc = ConditionConfig { bps_dim: 8, bps_seed: 1 };
        let model = FlowModel::new(layout, cc, &[8], 3);
        let cond = crate::flowgen::Condition::new(&ep.object, &ep.trajectory, None, &cc).unwrap();
        let features = cond.features(cc.bps_dim);
        (ep, model, features)
    }

    #[test]
    fn hook_only_fires_before_the_last_step() {
        let (ep, model, features) = hook_fixture();
        let mut hook = SimulationHook::new(&model, features.clone(), scene_of(&ep), small_refine(16)).unwrap();
        let mut state = encode(&ep.motion, 21).unwrap();
        state.tau = 0.5;
        let before = state.clone();
        hook.replace_state(3, 10, &mut state).unwrap();
        assert_eq!(state, before);
        assert!(hook.last.is_none());

        state.tau = 0.9;
        let x = state.x.clone();
        hook.replace_state(9, 10, &mut state).unwrap();
        let r = hook.last.as_ref().expect("refinement ran");
        let v = model.velocity(&x, 0.9, &features).unwrap();
        let refined = encode(&r.motion, 21).unwrap().x;
        for i in 0..x.len() {
            let want = 0.9 * refined[i] + 0.1 * (x[i] - 0.9 * v[i]);
            assert!((state.x[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn hook_passes_state_through_when_samples_diverge() {
        let (ep, model, features) = hook_fixture();
        let mut cfg = small_refine(16);
        cfg.sim.max_speed = 1e-3;
        let mut hook = SimulationHook::new(&model, features, scene_of(&ep), cfg).unwrap();
        let mut state = encode(&ep.motion, 21).unwrap();
        state.tau = 0.9;
        let before = state.clone();
        hook.replace_state(9, 10, &mut state).unwrap();
        assert_eq!(state, before);
        assert!(hook.last.is_none());
        assert!(hook.skipped.is_some());
    }

    #[test]
    fn snapshots_follow_motion_frames() {
        let s = skel();
        let ep = short_episode(4, PathFamily::Stationary);
        let cfg = SimConfig::default();
        let sim = Simulator::new(&cfg, &s, Some(&ep.object)).unwrap();
        let welds = weld_schedule(&s, &ep.contacts, &ep.trajectory);
        let r = simulate(&sim, &ep.motion, &ep.trajectory, &welds).unwrap();
        assert_eq!(r.motion.len(), 16);
        assert_eq!(r.object.len(), 16);
        assert_eq!(r.loads.len(), 45);
        // the first snapshot is the initial state
        assert_eq!(r.motion.frames[0][0].gamma, ep.motion.frames[0][0].gamma);
        let pose: &AgentPose = &r.motion.frames[0][1];
        assert_eq!(pose.beta, ep.motion.frames[0][1].beta);
    }
}
