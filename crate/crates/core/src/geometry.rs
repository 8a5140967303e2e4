//! Analytic object primitives: signed distance, surface sampling, the basis
//! point set descriptor and body/object penetration.

use std::f64::consts::PI;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{mat3_to_na, na_to_mat3, Mat3};

pub const DEFAULT_BPS_DIM: usize = 256;
pub const BPS_RADIUS: f64 = 1.5;
const TRAJ_MAGIC: &[u8; 4] = b"CMFT";
const TRAJ_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid object: {0}")]
    InvalidObject(String),
    #[error("object json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad trajectory file: {0}")]
    BadFormat(String),
}

/// Closed primitive shape in its own frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Box { half_extents: [f64; 3] },
    /// Axis along local +z.
    Cylinder { radius: f64, half_height: f64 },
    Composite { parts: Vec<Part> },
}

/// A non-composite primitive placed in the composite's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub rotation: Mat3<f64>,
    pub translation: [f64; 3],
    pub shape: Primitive,
}

impl Part {
    fn pose(&self) -> Pose {
        Pose {
            rotation: mat3_to_na(&self.rotation),
            translation: Vector3::from(self.translation),
        }
    }
}

/// Rigid transform body → world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn to_body(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, inner: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }
}

/// Object with mass properties. The body frame origin is the center of mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    #[serde(flatten)]
    pub primitive: Primitive,
    pub mass: f64,
    pub inertia: Mat3<f64>,
}

impl ObjectSpec {
    /// Uniform-density object; composite parts share one density.
    pub fn uniform(primitive: Primitive, mass: f64) -> Result<Self, GeometryError> {
        let inertia = na_to_mat3(&(unit_density_inertia(&primitive) * (mass / volume(&primitive))));
        let obj = ObjectSpec {
            primitive,
            mass,
            inertia,
        };
        obj.validate()?;
        Ok(obj)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        validate_primitive(&self.primitive, true)?;
        if !(self.mass > 0.0) {
            return Err(GeometryError::InvalidObject("mass must be positive".into()));
        }
        let i = self.inertia_matrix();
        if (i - i.transpose()).abs().max() > 1e-9 * i.abs().max() {
            return Err(GeometryError::InvalidObject("inertia must be symmetric".into()));
        }
        let eig = i.symmetric_eigenvalues();
        if eig.iter().any(|e| *e <= 0.0) {
            return Err(GeometryError::InvalidObject("inertia must be positive definite".into()));
        }
        Ok(())
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        mat3_to_na(&self.inertia)
    }

    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let obj: ObjectSpec = serde_json::from_str(text)?;
        obj.validate()?;
        Ok(obj)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("object serializes")
    }

    /// Signed distance from a world point to the posed surface.
    pub fn signed_distance(&self, pose: &Pose, point: &Vector3<f64>) -> f64 {
        sdf_local(&self.primitive, &pose.to_body(point))
    }

    /// Outward unit gradient of the SDF (world frame).
    pub fn sdf_gradient(&self, pose: &Pose, point: &Vector3<f64>) -> Vector3<f64> {
        pose.rotation * sdf_gradient_local(&self.primitive, &pose.to_body(point))
    }

    /// Closest surface point, by repeated SDF projection.
    pub fn project_to_surface(&self, pose: &Pose, point: &Vector3<f64>) -> Vector3<f64> {
        let local = project_local(&self.primitive, &pose.to_body(point));
        pose.to_world(&local)
    }

    /// Radius of a ball around the body origin containing the object.
    pub fn bounding_radius(&self) -> f64 {
        bounding_radius(&self.primitive)
    }

    pub fn surface_area(&self) -> f64 {
        area(&self.primitive)
    }
}

fn validate_primitive(p: &Primitive, allow_composite: bool) -> Result<(), GeometryError> {
    let bad = |m: &str| Err(GeometryError::InvalidObject(m.into()));
    match p {
        Primitive::Box { half_extents } => {
            if half_extents.iter().any(|h| !(*h > 0.0)) {
                return bad("box half extents must be positive");
            }
        }
        Primitive::Cylinder { radius, half_height } => {
            if !(*radius > 0.0 && *half_height > 0.0) {
                return bad("cylinder dimensions must be positive");
            }
        }
        Primitive::Composite { parts } => {
            if !allow_composite {
                return bad("composites cannot nest");
            }
            if parts.is_empty() {
                return bad("composite needs at least one part");
            }
            for part in parts {
                validate_primitive(&part.shape, false)?;
                let r = mat3_to_na(&part.rotation);
                if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-9 || r.determinant() < 0.0 {
                    return bad("part rotation must be proper");
                }
            }
        }
    }
    Ok(())
}

/// Exact signed distance in the primitive's frame (composite: min over parts).
pub fn sdf_local(p: &Primitive, x: &Vector3<f64>) -> f64 {
    match p {
        Primitive::Box { half_extents } => {
            let q = Vector3::new(
                x.x.abs() - half_extents[0],
                x.y.abs() - half_extents[1],
                x.z.abs() - half_extents[2],
            );
            let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
            outside + q.x.max(q.y).max(q.z).min(0.0)
        }
        Primitive::Cylinder { radius, half_height } => {
            let dr = (x.x * x.x + x.y * x.y).sqrt() - radius;
            let dz = x.z.abs() - half_height;
            let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
            outside + dr.max(dz).min(0.0)
        }
        Primitive::Composite { parts } => parts
            .iter()
            .map(|part| sdf_local(&part.shape, &part.pose().to_body(x)))
            .fold(f64::INFINITY, f64::min),
    }
}

fn sdf_gradient_local(p: &Primitive, x: &Vector3<f64>) -> Vector3<f64> {
    let h = 1e-6;
    let g = Vector3::new(
        sdf_local(p, &(x + Vector3::x() * h)) - sdf_local(p, &(x - Vector3::x() * h)),
        sdf_local(p, &(x + Vector3::y() * h)) - sdf_local(p, &(x - Vector3::y() * h)),
        sdf_local(p, &(x + Vector3::z() * h)) - sdf_local(p, &(x - Vector3::z() * h)),
    );
    let n = g.norm();
    if n > 1e-12 {
        g / n
    } else {
        Vector3::z()
    }
}

fn project_local(p: &Primitive, x: &Vector3<f64>) -> Vector3<f64> {
    let mut y = *x;
    for _ in 0..16 {
        let d = sdf_local(p, &y);
        if d.abs() < 1e-12 {
            break;
        }
        y -= sdf_gradient_local(p, &y) * d;
    }
    y
}

fn volume(p: &Primitive) -> f64 {
    match p {
        Primitive::Box { half_extents: h } => 8.0 * h[0] * h[1] * h[2],
        Primitive::Cylinder { radius, half_height } => PI * radius * radius * 2.0 * half_height,
        Primitive::Composite { parts } => parts.iter().map(|q| volume(&q.shape)).sum(),
    }
}

fn area(p: &Primitive) -> f64 {
    match p {
        Primitive::Box { half_extents: h } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
        Primitive::Cylinder { radius, half_height } => {
            2.0 * PI * radius * radius + 2.0 * PI * radius * 2.0 * half_height
        }
        Primitive::Composite { parts } => parts.iter().map(|q| area(&q.shape)).sum(),
    }
}

/// Inertia about the frame origin for unit density.
fn unit_density_inertia(p: &Primitive) -> Matrix3<f64> {
    match p {
        Primitive::Box { half_extents: h } => {
            let m = volume(p);
            Matrix3::from_diagonal(&Vector3::new(
                m / 3.0 * (h[1] * h[1] + h[2] * h[2]),
                m / 3.0 * (h[0] * h[0] + h[2] * h[2]),
                m / 3.0 * (h[0] * h[0] + h[1] * h[1]),
            ))
        }
        Primitive::Cylinder { radius, half_height } => {
            let m = volume(p);
            let lat = m * (3.0 * radius * radius + 4.0 * half_height * half_height) / 12.0;
            Matrix3::from_diagonal(&Vector3::new(lat, lat, m * radius * radius / 2.0))
        }
        Primitive::Composite { parts } => parts.iter().fold(Matrix3::zeros(), |acc, part| {
            let pose = part.pose();
            let m = volume(&part.shape);
            let t = pose.translation;
            let local = pose.rotation * unit_density_inertia(&part.shape) * pose.rotation.transpose();
            acc + local + (Matrix3::identity() * t.norm_squared() - t * t.transpose()) * m
        }),
    }
}

fn bounding_radius(p: &Primitive) -> f64 {
    match p {
        Primitive::Box { half_extents: h } => Vector3::from(*h).norm(),
        Primitive::Cylinder { radius, half_height } => radius.hypot(*half_height),
        Primitive::Composite { parts } => parts
            .iter()
            .map(|q| Vector3::from(q.translation).norm() + bounding_radius(&q.shape))
            .fold(0.0, f64::max),
    }
}

/// A point on the object surface with its outward normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// Area-uniform samples on a single (non-composite) primitive.
fn sample_primitive(p: &Primitive, rng: &mut ChaCha8Rng) -> SurfacePoint {
    match p {
        Primitive::Box { half_extents: h } => {
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let mut u = rng.gen::<f64>() * 2.0 * areas.iter().sum::<f64>();
            let mut face = 5;
            for k in 0..6 {
                if u < areas[k / 2] {
                    face = k;
                    break;
                }
                u -= areas[k / 2];
            }
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut point = Vector3::zeros();
            let mut normal = Vector3::zeros();
            for k in 0..3 {
                point[k] = if k == axis {
                    sign * h[k]
                } else {
                    rng.gen_range(-h[k]..=h[k])
                };
            }
            normal[axis] = sign;
            SurfacePoint { point, normal }
        }
        Primitive::Cylinder { radius, half_height } => {
            let cap = PI * radius * radius;
            let side = 2.0 * PI * radius * 2.0 * half_height;
            let u = rng.gen::<f64>() * (2.0 * cap + side);
            let phi = rng.gen::<f64>() * 2.0 * PI;
            if u < side {
                SurfacePoint {
                    point: Vector3::new(radius * phi.cos(), radius * phi.sin(), rng.gen_range(-half_height..=*half_height)),
                    normal: Vector3::new(phi.cos(), phi.sin(), 0.0),
                }
            } else {
                let sign = if u < side + cap { 1.0 } else { -1.0 };
                let r = radius * rng.gen::<f64>().sqrt();
                SurfacePoint {
                    point: Vector3::new(r * phi.cos(), r * phi.sin(), sign * half_height),
                    normal: Vector3::new(0.0, 0.0, sign),
                }
            }
        }
        Primitive::Composite { .. } => unreachable!("composites are sampled part by part"),
    }
}

/// `n` area-uniform surface samples in the body frame; deterministic per seed.
/// Composite samples buried inside another part are rejected.
pub fn sample_surface(obj: &ObjectSpec, n: usize, seed: u64) -> Vec<SurfacePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    match &obj.primitive {
        Primitive::Composite { parts } => {
            let areas: Vec<f64> = parts.iter().map(|q| area(&q.shape)).collect();
            let total: f64 = areas.iter().sum();
            while out.len() < n {
                let mut u = rng.gen::<f64>() * total;
                let mut idx = parts.len() - 1;
                for (k, a) in areas.iter().enumerate() {
                    if u < *a {
                        idx = k;
                        break;
                    }
                    u -= a;
                }
                let pose = parts[idx].pose();
                let s = sample_primitive(&parts[idx].shape, &mut rng);
                let point = pose.to_world(&s.point);
                if sdf_local(&obj.primitive, &point).abs() < 1e-9 {
                    out.push(SurfacePoint {
                        point,
                        normal: pose.rotation * s.normal,
                    });
                }
            }
        }
        prim => {
            for _ in 0..n {
                out.push(sample_primitive(prim, &mut rng));
            }
        }
    }
    out
}

/// Fixed basis points, uniform in a ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisPointSet {
    pub points: Vec<Vector3<f64>>,
    pub seed: u64,
    pub center: Vector3<f64>,
    pub radius: f64,
}

/// Distances from each basis point to the object surface (0 inside).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpsDescriptor {
    pub values: Vec<f64>,
    pub basis_seed: u64,
    /// Basis distribution tag; always "ball" here.
    pub distribution: String,
}

impl BasisPointSet {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self::with_center(dim, seed, Vector3::zeros(), BPS_RADIUS)
    }

    pub fn with_center(dim: usize, seed: u64, center: Vector3<f64>, radius: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..dim)
            .map(|_| {
                let dir = loop {
                    let v = Vector3::new(
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    );
                    let n: f64 = v.norm();
                    if n > 1e-12 {
                        break v / n;
                    }
                };
                let r = radius * rng.gen::<f64>().cbrt();
                center + dir * r
            })
            .collect();
        BasisPointSet {
            points,
            seed,
            center,
            radius,
        }
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn encode(&self, obj: &ObjectSpec, pose: &Pose) -> BpsDescriptor {
        BpsDescriptor {
            values: self
                .points
                .iter()
                .map(|b| obj.signed_distance(pose, b).max(0.0))
                .collect(),
            basis_seed: self.seed,
            distribution: "ball".into(),
        }
    }
}

/// Descriptor with a default scene-centred basis.
pub fn bps_encode(obj: &ObjectSpec, pose: &Pose, dim: usize, basis_seed: u64) -> BpsDescriptor {
    BasisPointSet::new(dim, basis_seed).encode(obj, pose)
}

/// Mean over joints of `max(0, radius_j - sdf(joint_j))`.
pub fn penetration_depth(joints: &[Vector3<f64>], radii: &[f64], obj: &ObjectSpec, pose: &Pose) -> f64 {
    assert_eq!(joints.len(), radii.len(), "one radius per joint");
    let total: f64 = joints
        .iter()
        .zip(radii)
        .map(|(p, r)| (r - obj.signed_distance(pose, p)).max(0.0))
        .sum();
    total / joints.len() as f64
}

/// Per-frame rigid pose track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrajectory {
    pub poses: Vec<Pose>,
    pub frame_rate: f64,
}

impl ObjectTrajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), GeometryError> {
        w.write_all(TRAJ_MAGIC)?;
        w.write_u16::<LittleEndian>(TRAJ_VERSION)?;
        w.write_u32::<LittleEndian>(self.poses.len() as u32)?;
        w.write_f64::<LittleEndian>(self.frame_rate)?;
        for p in &self.poses {
            for i in 0..3 {
                for j in 0..3 {
                    w.write_f64::<LittleEndian>(p.rotation[(i, j)])?;
                }
            }
            for k in 0..3 {
                w.write_f64::<LittleEndian>(p.translation[k])?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, GeometryError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TRAJ_MAGIC {
            return Err(GeometryError::BadFormat("bad magic".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != TRAJ_VERSION {
            return Err(GeometryError::BadFormat(format!("unsupported version {version}")));
        }
        let t = r.read_u32::<LittleEndian>()? as usize;
        let frame_rate = r.read_f64::<LittleEndian>()?;
        let mut poses = Vec::with_capacity(t);
        for _ in 0..t {
            let mut rot = Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    rot[(i, j)] = r.read_f64::<LittleEndian>()?;
                }
            }
            let mut tr = Vector3::zeros();
            for k in 0..3 {
                tr[k] = r.read_f64::<LittleEndian>()?;
            }
            poses.push(Pose::new(rot, tr));
        }
        Ok(ObjectTrajectory { poses, frame_rate })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), GeometryError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, GeometryError> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
