//! Invariant suites run by `selftest` and the acceptance target. Each suite
//! returns one pass/fail line.

use std::path::Path;

use cofm_core::advprior::{prior_training_loss, BodyPrior, InteractionPrior, Priors};
use cofm_core::flowgen::{
    canonicalize, encode, initial_noise, interpolate, sample_state, FlowExample, FlowLayout, FlowModel, LossWeights, ConditionConfig,
    Preconditioner, training_loss_gradient,
};
use cofm_core::geometry::{bps_encode, sample_surface, ObjectSpec, Part, Pose, Primitive};
use cofm_core::kinematics::{mat3_to_na, matrix_to_rot6d, na_to_mat3, rot6d_to_matrix, rotvec_to_matrix, Skeleton, SHAPE_DIM};
use cofm_core::metrics::{contact_accuracy, extract_features, fid_features, idf, penetration};
use cofm_core::nnet::Mlp;
use cofm_core::stabsim::{
    cma_minimize, simulate, weld_schedule, AgentState, AgentTarget, CmaConfig, ControlTarget, ObjectState, SimConfig,
    SimState, Simulator, EIGEN_FLOOR,
};
use cofm_core::strategy::{anchor_losses, AffordanceNet, AnchorPair, ContactGuidance, GuidanceConfig, SurfaceAffordance};
use cofm_core::synthdata::{generate_corpus, generate_episode, Episode, EpisodeParams, PathFamily};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector4};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::path_hash;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Coordinates whose gradient is below this fraction of the largest one are
/// under the finite-difference rounding floor and are not sampled.
pub const GRADIENT_RESOLUTION: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
enum Stencil {
    /// Fourth-order central difference, h = 1e-4.
    Smooth,
    /// Second-order central difference, h = 3e-6, for piecewise losses
    /// checked at points whose kinks are further away than the stencil.
    Kinked,
}

impl Stencil {
    fn derivative(self, mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
        match self {
            Stencil::Smooth => {
                let h = 1e-4;
                (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
            }
            Stencil::Kinked => {
                let h = 3e-6;
                (f(x + h) - f(x - h)) / (2.0 * h)
            }
        }
    }
}

fn oracle_episodes(n: usize, seed: u64) -> Vec<Episode> {
    let params = EpisodeParams {
        frames: 16,
        frame_rate: 8.0,
        ..Default::default()
    };
    generate_corpus(n, seed, &params).expect("oracle corpus")
}

/// Worst relative error over coordinates of one loss term.
struct GradientAudit {
    name: &'static str,
    worst: f64,
    count: usize,
}

/// Checks `grad` against finite differences of `loss` at `x` on 100 random
/// coordinates above the resolution floor. `loss(i, v)` evaluates the loss
/// with coordinate `i` set to `v`.
fn audit(
    name: &'static str,
    stencil: Stencil,
    x: &[f64],
    grad: &[f64],
    rng: &mut ChaCha8Rng,
    mut loss: impl FnMut(usize, f64) -> f64,
) -> GradientAudit {
    let top = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    let mut coords: Vec<usize> = (0..grad.len())
        .filter(|&i| grad[i].abs() >= GRADIENT_RESOLUTION * top && top > 0.0)
        .collect();
    coords.shuffle(rng);
    coords.truncate(100);
    let mut worst: f64 = 0.0;
    for &i in &coords {
        let fd = stencil.derivative(|v| loss(i, v), x[i]);
        worst = worst.max(rel_err(fd, grad[i]));
    }
    GradientAudit {
        name,
        worst,
        count: coords.len(),
    }
}

fn flow_term_audits(rng: &mut ChaCha8Rng) -> Vec<GradientAudit> {
    let skel = Skeleton::default_21();
    let cond = ConditionConfig { bps_dim: 8, bps_seed: 0 };
    let examples: Vec<FlowExample> = oracle_episodes(3, 500)
        .iter()
        .map(|ep| FlowExample::from_episode(ep, 21, &cond).unwrap())
        .collect();
    let layout = FlowLayout::new(16, 21, 8.0);
    let precond = Preconditioner::fit(&examples.iter().map(|e| e.x1.as_slice()).collect::<Vec<_>>());
    let scale = precond.std.clone();
    let mut model = FlowModel::new(layout, cond, &[16], 2).with_preconditioner(precond);
    // noise draws whose one-step estimate keeps every entry at least 1e-4
    // of its scale from its target, so the L1 pose term has no kink near
    // the stencil
    let items: Vec<(&FlowExample, Vec<f64>, f64)> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let tau = 0.2 + 0.3 * i as f64;
            let features = e.cond.features(cond.bps_dim);
            let margin = |x0: &[f64]| {
                let xt = interpolate(x0, &e.x1, tau);
                let v = model.velocity(&xt, tau, &features).unwrap();
                xt.iter()
                    .zip(&v)
                    .zip(e.x1.iter().zip(&scale))
                    .map(|((x, v), (t, s))| (x + (1.0 - tau) * v - t).abs() / s)
                    .fold(f64::INFINITY, f64::min)
            };
            let x0 = (0..1000)
                .map(|k| initial_noise(layout.dim(), 40 + 1000 * i as u64 + k))
                .find(|x0| margin(x0) >= 1e-4)
                .expect("a noise draw clear of the pose-loss kinks");
            (e, x0, tau)
        })
        .collect();
    let only = |flow, smpl, foot| LossWeights { flow, smpl, foot, prior: 0.0 };
    // the pose term is an L1 distance
    let terms = [
        ("flow", only(1.0, 0.0, 0.0), Stencil::Smooth),
        ("smpl", only(0.0, 1.0, 0.0), Stencil::Kinked),
        ("foot", only(0.0, 0.0, 1.0), Stencil::Smooth),
    ];
    let params = model.net.params();
    let mut audits = Vec::new();
    for (name, w, stencil) in terms {
        let (_, g) = training_loss_gradient(&model, &skel, &items, &w, None).unwrap();
        audits.push(audit(name, stencil, &params, &g, rng, |i, v| {
            let mut p = params.clone();
            p[i] = v;
            model.net.set_params(&p).unwrap();
            training_loss_gradient(&model, &skel, &items, &w, None).unwrap().0
        }));
    }
    model.net.set_params(&params).unwrap();
    audits
}

fn flatten(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|p| p.iter().copied()).collect()
}

fn strategy_term_audits(rng: &mut ChaCha8Rng) -> Vec<GradientAudit> {
    let obj = ObjectSpec::uniform(Primitive::Box { half_extents: [0.2, 0.15, 0.1] }, 5.0).unwrap();
    let net = AffordanceNet::new(&[16, 16], 9);
    let aff = SurfaceAffordance::new(&net, &obj);
    let surface = sample_surface(&obj, 256, 3);
    let pairs: Vec<AnchorPair> = (0..120)
        .map(|i| {
            let sp = &surface[2 * i];
            let jitter = Vector3::from_fn(|_, _| rng.gen_range(-0.01..0.01));
            AnchorPair {
                p_hat: sp.point + sp.normal * rng.gen_range(0.005..0.03) + jitter,
                n_hat: sp.normal * rng.gen_range(0.5..2.0) + Vector3::from_fn(|_, _| rng.gen_range(-0.3..0.3)),
                p: surface[2 * i + 1].point,
                n: surface[2 * i + 1].normal,
                s: i % 4 != 3,
            }
        })
        .collect();
    let (_, g) = anchor_losses(&pairs, &aff);
    let points = flatten(&pairs.iter().map(|q| q.p_hat).collect::<Vec<_>>());
    let normals = flatten(&pairs.iter().map(|q| q.n_hat).collect::<Vec<_>>());
    let with_point = |k: usize, v: f64| {
        let mut q = pairs.clone();
        q[k / 3].p_hat[k % 3] = v;
        anchor_losses(&q, &aff).0
    };
    let with_normal = |k: usize, v: f64| {
        let mut q = pairs.clone();
        q[k / 3].n_hat[k % 3] = v;
        anchor_losses(&q, &aff).0
    };
    vec![
        audit("anchor", Stencil::Smooth, &points, &flatten(&g.anchor), rng, |k, v| with_point(k, v).anchor),
        audit("normal", Stencil::Smooth, &normals, &flatten(&g.normal), rng, |k, v| with_normal(k, v).normal),
        // the affordance is read at the nearest-face projection
        audit("affordance", Stencil::Kinked, &points, &flatten(&g.aff), rng, |k, v| with_point(k, v).aff),
    ]
}

fn perturbed_state(seed: u64, scale: f64) -> (FlowLayout, Vec<f64>, Episode) {
    let ep = canonicalize(&oracle_episodes(1, seed).remove(0));
    let mut x = encode(&ep.motion, 21).unwrap().x;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for v in x.iter_mut() {
        *v += scale * rng.gen_range(-1.0..1.0);
    }
    (FlowLayout::new(16, 21, 8.0), x, ep)
}

fn contact_audit(rng: &mut ChaCha8Rng) -> GradientAudit {
    let skel = Skeleton::default_21();
    let (layout, x, ep) = perturbed_state(4, 0.05);
    let guide = ContactGuidance::new(&skel, layout, ep.contacts.clone(), GuidanceConfig::default());
    let (_, g) = guide.gradient(&x).unwrap();
    audit("contact", Stencil::Smooth, &x, &g, rng, |i, v| {
        let mut y = x.clone();
        y[i] = v;
        guide.loss(&y)
    })
}

fn generator_audit(rng: &mut ChaCha8Rng) -> GradientAudit {
    let (layout, x, _) = perturbed_state(2, 0.1);
    let priors = Priors {
        body: Some(BodyPrior::new(21, &[32, 16], 7)),
        interaction: Some(InteractionPrior::new(21, &[32], 8)),
    };
    // the generator term is −Σ_k log D_k
    let mut g = vec![0.0; x.len()];
    for (_, gk) in priors.log_score_gradients(&layout, &x).unwrap() {
        for (a, b) in g.iter_mut().zip(&gk) {
            *a -= b;
        }
    }
    audit("generator", Stencil::Smooth, &x, &g, rng, |i, v| {
        let mut y = x.clone();
        y[i] = v;
        prior_training_loss(&priors, &layout, &y).unwrap()
    })
}

/// Central finite differences against the analytic gradient of every
/// training and guidance loss, 100 coordinates each.
pub fn gradient_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut audits = flow_term_audits(&mut rng);
    audits.extend(strategy_term_audits(&mut rng));
    audits.push(contact_audit(&mut rng));
    audits.push(generator_audit(&mut rng));
    let passed = audits.iter().all(|a| a.worst < GRADIENT_TOLERANCE && a.count >= 100);
    let detail = audits
        .iter()
        .map(|a| format!("{} {:.1e} ({} coords)", a.name, a.worst, a.count))
        .collect::<Vec<_>>()
        .join(", ");
    Check::new("gradient suite", passed, format!("worst relative error: {detail} (need < 1e-4)"))
}

/// Euler sampling of a constant field lands exactly on the target.
pub fn flow_exactness() -> Check {
    let cond = ConditionConfig { bps_dim: 8, bps_seed: 0 };
    let ep = oracle_episodes(1, 77).remove(0);
    let ex = FlowExample::from_episode(&ep, 21, &cond).unwrap();
    let layout = FlowLayout::new(16, 21, 8.0);
    let x0 = initial_noise(layout.dim(), 21);
    let mut net = Mlp::zeros(&[FlowModel::input_width(&layout, &cond), layout.dim()]);
    for (b, (t, s)) in net.biases[0].iter_mut().zip(ex.x1.iter().zip(&x0)) {
        *b = t - s;
    }
    let model = FlowModel {
        layout,
        condition: cond,
        precond: None,
        net,
    };
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for k in [1, 10, 100] {
        let out = sample_state(&model, &ex.cond, 21, k, &mut []).unwrap();
        let err = out.x.iter().zip(&ex.x1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        details.push(format!("K={k} {err:.1e}"));
    }
    Check::new("flow exactness", worst < 1e-12, format!("max |x − target|: {}", details.join(", ")))
}

fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
        .sum()
}

/// Sphere 10-D and Rosenbrock 5-D within their evaluation budgets.
pub fn cma_benchmarks() -> Check {
    let cfg = CmaConfig {
        sigma0: 0.5,
        ..Default::default()
    };
    let s = cma_minimize(sphere, vec![1.0; 10], &cfg, 5000).expect("sphere run");
    let norm = sphere(&s.best).sqrt();
    let r = cma_minimize(rosenbrock, vec![0.0; 5], &CmaConfig { seed: 3, ..cfg }, 20000).expect("rosenbrock run");
    let min_eig = s.min_eigenvalue.min(r.min_eigenvalue);
    let passed = norm < 1e-6 && s.evaluations <= 5000 && r.best_cost < 1e-3 && r.evaluations <= 20000 && min_eig >= EIGEN_FLOOR;
    Check::new(
        "CMA-ES benchmarks",
        passed,
        format!(
            "sphere ‖x‖ {norm:.1e} in {} evals, Rosenbrock f {:.1e} in {} evals, min covariance eigenvalue {min_eig:.1e}",
            s.evaluations, r.best_cost, r.evaluations
        ),
    )
}

fn free_fall_error() -> f64 {
    let skel = Skeleton::default_21();
    let cfg = SimConfig::default();
    let obj = ObjectSpec::uniform(Primitive::Box { half_extents: [0.2, 0.15, 0.1] }, 3.0).unwrap();
    let sim = Simulator::new(&cfg, &skel, Some(&obj)).unwrap();
    let z0 = 20.0;
    let mut state = SimState {
        agents: Vec::new(),
        object: Some(ObjectState::at_rest(&Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, z0)))),
    };
    let target = ControlTarget {
        agents: Vec::new(),
        welds: Vec::new(),
    };
    let frames = cfg.control_rate.round() as usize;
    let mut worst: f64 = 0.0;
    for c in 1..=frames {
        sim.step(&mut state, &target).unwrap();
        let t = c as f64 / cfg.control_rate;
        let z = state.object.as_ref().unwrap().translation.z;
        worst = worst.max((z - (z0 - 0.5 * 9.81 * t * t)).abs());
    }
    worst
}

fn static_hold_residual() -> f64 {
    let skel = Skeleton::default_21();
    let params = EpisodeParams {
        frames: 60,
        frame_rate: 20.0,
        path: Some(PathFamily::Stationary),
        ..Default::default()
    };
    let ep = canonicalize(&generate_episode(1, &params).unwrap());
    let cfg = SimConfig::default();
    let sim = Simulator::new(&cfg, &skel, Some(&ep.object)).unwrap();
    let welds = weld_schedule(&skel, &ep.contacts, &ep.trajectory);
    let r = simulate(&sim, &ep.motion, &ep.trajectory, &welds).unwrap();
    let weight = ep.object.mass * 9.81;
    // settled after one second
    let settle = cfg.control_rate.round() as usize;
    r.loads[settle..].iter().map(|l| l.force.norm() / weight).fold(0.0, f64::max)
}

fn pd_step_error() -> f64 {
    let skel = Skeleton::default_21();
    let cfg = SimConfig::default();
    let sim = Simulator::new(&cfg, &skel, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let agent = AgentState {
        rotations: (0..skel.joint_count())
            .map(|_| rotvec_to_matrix(&Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5))))
            .collect(),
        angular_velocities: vec![Vector3::zeros(); skel.joint_count()],
        root: Vector3::new(0.0, 0.0, 0.9),
        root_velocity: Vector3::zeros(),
        beta: [0.0; SHAPE_DIM],
        grips: [false; 2],
    };
    let joint = 10;
    let step = Vector3::new(0.3, -0.2, 0.35);
    let mut target = AgentTarget::hold(&agent);
    target.rotations[joint] = rotvec_to_matrix(&step) * agent.rotations[joint];
    let goal = target.rotations[joint];
    let mut state = SimState {
        agents: vec![agent],
        object: None,
    };
    let target = ControlTarget {
        agents: vec![target],
        welds: Vec::new(),
    };
    let frames = (2.0 * cfg.control_rate).round() as usize;
    let settle = frames / 4;
    let mut worst: f64 = 0.0;
    for c in 0..frames {
        sim.step(&mut state, &target).unwrap();
        let r = state.agents[0].rotations[joint];
        let err = Rotation3::from_matrix_unchecked(goal * r.transpose()).angle();
        if c >= settle {
            worst = worst.max(err);
        }
    }
    worst / step.norm()
}

/// Free fall, static two-hand hold and PD step response.
pub fn simulator_oracles() -> Check {
    let fall = free_fall_error();
    let hold = static_hold_residual();
    let pd = pd_step_error();
    Check::new(
        "simulator oracles",
        fall < 1e-3 && hold < 0.02 && pd < 0.02,
        format!(
            "free fall max error {fall:.1e} m (need < 1e-3), hold residual {:.2}% of weight (need < 2%), PD error after 0.5 s {:.2}% of step (need < 2%)",
            hold * 100.0,
            pd * 100.0
        ),
    )
}

fn handle_box() -> ObjectSpec {
    let rot = na_to_mat3(&Matrix3::identity());
    ObjectSpec::uniform(
        Primitive::Composite {
            parts: vec![
                Part {
                    rotation: rot,
                    translation: [0.0; 3],
                    shape: Primitive::Box { half_extents: [0.4, 0.2, 0.15] },
                },
                Part {
                    rotation: rot,
                    translation: [0.45, 0.0, 0.0],
                    shape: Primitive::Cylinder { radius: 0.03, half_height: 0.1 },
                },
                Part {
                    rotation: rot,
                    translation: [-0.45, 0.0, 0.0],
                    shape: Primitive::Cylinder { radius: 0.03, half_height: 0.1 },
                },
            ],
        },
        8.0,
    )
    .unwrap()
}

/// Grid of points on the surface of a box or cylinder with spacing about
/// `s`. Edges, rims and corners lie on the grid, so the distance to the
/// nearest point converges quadratically in `s` everywhere.
fn surface_grid(p: &Primitive, s: f64) -> Vec<Vector3<f64>> {
    let steps = |len: f64| (len / s).ceil().max(1.0) as usize;
    let lin = |a: f64, n: usize, i: usize| -a + 2.0 * a * i as f64 / n as f64;
    let mut pts = Vec::new();
    match p {
        Primitive::Box { half_extents: h } => {
            for axis in 0..3 {
                let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
                let (nb, nc) = (steps(2.0 * h[b]), steps(2.0 * h[c]));
                for sign in [-1.0, 1.0] {
                    for i in 0..=nb {
                        for j in 0..=nc {
                            let mut v = Vector3::zeros();
                            v[axis] = sign * h[axis];
                            v[b] = lin(h[b], nb, i);
                            v[c] = lin(h[c], nc, j);
                            pts.push(v);
                        }
                    }
                }
            }
        }
        Primitive::Cylinder { radius, half_height } => {
            let mut ring = |r: f64, z: f64| {
                let n = steps(std::f64::consts::TAU * r);
                for k in 0..n {
                    let phi = std::f64::consts::TAU * k as f64 / n as f64;
                    pts.push(Vector3::new(r * phi.cos(), r * phi.sin(), z));
                }
            };
            let nz = steps(2.0 * half_height);
            for i in 0..=nz {
                ring(*radius, lin(*half_height, nz, i));
            }
            let nr = steps(*radius);
            for z in [-half_height, *half_height] {
                for i in 0..nr {
                    ring(radius * i as f64 / nr as f64, z);
                }
            }
        }
        Primitive::Composite { .. } => unreachable!("composites are gridded part by part"),
    }
    pts
}

fn part_local(part: &Part, x: &Vector3<f64>) -> Vector3<f64> {
    mat3_to_na(&part.rotation).transpose() * (x - Vector3::from(part.translation))
}

/// Containment by the defining inequalities, with a margin so points on a
/// shared boundary count as outside.
fn strictly_inside(p: &Primitive, x: &Vector3<f64>) -> bool {
    let m = 1e-12;
    match p {
        Primitive::Box { half_extents: h } => (0..3).all(|k| x[k].abs() < h[k] - m),
        Primitive::Cylinder { radius, half_height } => x.x.hypot(x.y) < radius - m && x.z.abs() < half_height - m,
        Primitive::Composite { parts } => parts.iter().any(|part| strictly_inside(&part.shape, &part_local(part, x))),
    }
}

/// Surface points of `p`, at most `n`, on grids of one common spacing.
/// Composite parts drop the points buried in another part.
fn surface_oracle_points(p: &Primitive, n: usize) -> Vec<Vector3<f64>> {
    let build = |s: f64| match p {
        Primitive::Composite { parts } => parts
            .iter()
            .enumerate()
            .flat_map(|(i, part)| {
                let r = mat3_to_na(&part.rotation);
                let t = Vector3::from(part.translation);
                surface_grid(&part.shape, s).into_iter().map(move |x| (i, r * x + t))
            })
            .filter(|(i, x)| {
                parts
                    .iter()
                    .enumerate()
                    .all(|(j, other)| j == *i || !strictly_inside(&other.shape, &part_local(other, x)))
            })
            .map(|(_, x)| x)
            .collect::<Vec<_>>(),
        _ => surface_grid(p, s),
    };
    let mut s = 1e-3;
    loop {
        let pts = build(s);
        if pts.len() <= n {
            return pts;
        }
        s *= (pts.len() as f64 / n as f64).sqrt().max(1.01);
    }
}

pub const SDF_ORACLE_SAMPLES: usize = 50_000;
pub const SDF_PROBES: usize = 10_000;
/// Probes closer to the surface than this are skipped; the grid spacing is
/// a few millimeters.
pub const SDF_PROBE_CLEARANCE: f64 = 0.01;

/// Worst gap between the posed SDF and the signed distance to a 50k-point
/// surface grid, over uniform probes in the padded bounding box. The sign
/// comes from containment, independently of the SDF.
fn sdf_oracle_error(obj: &ObjectSpec, seed: u64) -> f64 {
    let pose = Pose::new(rotvec_to_matrix(&Vector3::new(0.3, -0.2, 0.7)), Vector3::new(0.5, -1.0, 0.8));
    let grid = surface_oracle_points(&obj.primitive, SDF_ORACLE_SAMPLES);
    let lo = grid.iter().fold(Vector3::repeat(f64::INFINITY), |a, x| a.inf(x)).add_scalar(-0.3);
    let hi = grid.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, x| a.sup(x)).add_scalar(0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<Vector3<f64>> = (0..SDF_PROBES)
        .map(|_| Vector3::from_fn(|k, _| rng.gen_range(lo[k]..hi[k])))
        .collect();
    probes
        .par_iter()
        .filter_map(|x| {
            let d = grid.iter().map(|g| (g - x).norm()).fold(f64::INFINITY, f64::min);
            if d < SDF_PROBE_CLEARANCE {
                return None;
            }
            let oracle = if strictly_inside(&obj.primitive, x) { -d } else { d };
            Some((obj.signed_distance(&pose, &pose.to_world(x)) - oracle).abs())
        })
        .reduce(|| 0.0, f64::max)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q = Vector4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    *UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(q)).to_rotation_matrix().matrix()
}

/// SDF against a sampled-surface oracle, BPS determinism and part-order
/// invariance, 6D rotation round trip.
pub fn geometry_oracles() -> Check {
    let shapes = [
        ObjectSpec::uniform(Primitive::Box { half_extents: [0.3, 0.2, 0.15] }, 5.0).unwrap(),
        ObjectSpec::uniform(Primitive::Cylinder { radius: 0.18, half_height: 0.25 }, 5.0).unwrap(),
        handle_box(),
    ];
    let sdf = shapes
        .iter()
        .enumerate()
        .map(|(i, o)| sdf_oracle_error(o, 10 + i as u64))
        .fold(0.0, f64::max);

    let obj = handle_box();
    let pose = Pose::new(rotvec_to_matrix(&Vector3::new(0.0, 0.0, 0.4)), Vector3::new(0.1, 0.2, 0.9));
    let mut swapped = obj.clone();
    if let Primitive::Composite { parts } = &mut swapped.primitive {
        parts.reverse();
    }
    let a = bps_encode(&obj, &pose, 256, 1);
    let bps_ok = a == bps_encode(&obj, &pose, 256, 1) && a == bps_encode(&swapped, &pose, 256, 1);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rot: f64 = 0.0;
    for _ in 0..1000 {
        let r = random_rotation(&mut rng);
        let back = rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap();
        rot = rot.max((back - r).abs().max());
    }
    Check::new(
        "geometry oracles",
        sdf < 2e-3 && bps_ok && rot < 1e-9,
        format!(
            "SDF vs 50k-point surface oracle {sdf:.1e} m (need < 2e-3), BPS deterministic and part-order invariant: {bps_ok}, rotation round trip {rot:.1e} (need < 1e-9)"
        ),
    )
}

/// Oracle episodes scored against themselves.
pub fn metric_self_consistency() -> Check {
    let skel = Skeleton::default_21();
    let eps = oracle_episodes(12, 900);
    let mut worst_acc: f64 = 1.0;
    let mut worst_pen: f64 = 0.0;
    let mut worst_idf: f64 = 0.0;
    for ep in &eps {
        if let Ok(a) = contact_accuracy(&skel, &ep.motion, ep) {
            worst_acc = worst_acc.min(a);
        }
        worst_pen = worst_pen.max(penetration(&skel, &ep.motion, &ep.object, &ep.trajectory).unwrap());
        worst_idf = worst_idf.max(idf(&skel, &ep.motion, ep).unwrap());
    }
    let motions: Vec<_> = eps.iter().map(|e| e.motion.clone()).collect();
    let feats = extract_features(&skel, &motions, &eps).unwrap();
    let fid = fid_features(&feats, &feats).unwrap();
    Check::new(
        "metric self-consistency",
        worst_acc == 1.0 && worst_pen < 5e-3 && worst_idf < 1e-12 && fid < 1e-8,
        format!(
            "contact accuracy {worst_acc:.3} (need 1), penetration {worst_pen:.1e} (need < 5e-3), IDF {worst_idf:.1e} (need 0), fid_like(A, A) {fid:.1e} (need < 1e-8)"
        ),
    )
}

/// Runs `synth → train-flow → generate → eval` twice through `exec` in
/// fresh directories under `root` and compares every output byte for byte.
pub fn determinism(root: &Path, epochs: usize, exec: &dyn Fn(&[String]) -> i32) -> Check {
    let run = |dir: &Path| -> Result<Vec<String>, String> {
        std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
        let steps: Vec<Vec<String>> = vec![
            vec!["synth", "--episodes", "40", "--seed", "5", "--out", &p("train.cmfc")],
            vec!["synth", "--episodes", "6", "--seed", "6", "--out", &p("test.cmfc")],
            vec![
                "train-flow",
                "--corpus",
                &p("train.cmfc"),
                "--epochs",
                &epochs.to_string(),
                "--seed",
                "5",
                "--out",
                &p("flow.ckpt"),
            ],
            vec![
                "generate",
                "--ckpt",
                &p("flow.ckpt"),
                "--corpus",
                &p("test.cmfc"),
                "--variants",
                "+BPS",
                "--seed",
                "5",
                "--out",
                &p("gen"),
            ],
            vec!["eval", "--gen", &p("gen"), "--ref", &p("test.cmfc"), "--out", &p("report.csv")],
        ]
        .into_iter()
        .map(|v| v.into_iter().map(String::from).collect())
        .collect();
        for args in &steps {
            let code = exec(args);
            if code != 0 {
                return Err(format!("`{}` exited with {code}", args[0]));
            }
        }
        ["train.cmfc", "test.cmfc", "flow.ckpt", "gen", "report.csv"]
            .iter()
            .map(|f| path_hash(&dir.join(f)).map_err(|e| e.to_string()))
            .collect()
    };
    match (run(&root.join("a")), run(&root.join("b"))) {
        (Ok(a), Ok(b)) => {
            let same = a == b;
            Check::new(
                "determinism",
                same,
                format!(
                    "two runs of synth → train-flow ({epochs} epochs) → generate → eval {}",
                    if same { "are bitwise identical" } else { "differ" }
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => Check::new("determinism", false, e),
    }
}

/// Every fast suite, in criterion order.
pub fn invariant_suite(root: &Path, exec: &dyn Fn(&[String]) -> i32) -> Vec<Check> {
    vec![
        gradient_suite(),
        flow_exactness(),
        cma_benchmarks(),
        simulator_oracles(),
        geometry_oracles(),
        determinism(root, 5, exec),
        metric_self_consistency(),
    ]
}
