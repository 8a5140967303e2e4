//! Evaluation metrics: interaction distance field error, contact precision,
//! penetration, a Fréchet distance over handcrafted motion features,
//! diversity, and the ablation table built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{penetration_depth, ObjectSpec, ObjectTrajectory};
use crate::kinematics::{KinematicsError, MotionSequence, Skeleton};
use crate::synthdata::Episode;

/// A wrist closer than this to the surface is in contact.
pub const CONTACT_THRESHOLD: f64 = 0.05;
pub const IDF_POINTS: usize = 512;
pub const IDF_SHELL: f64 = 0.5;
pub const IDF_SEED: u64 = 0;
pub const FEATURE_DIM: usize = 64;
/// Ridge added to both covariances when a set has no more items than
/// feature dimensions.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-3;

const SPEED_BINS: usize = 16;
const SPEED_BIN_WIDTH: f64 = 0.125;
const HEIGHT_JOINTS: [&str; 8] = [
    "pelvis", "head", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_ankle", "r_ankle",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("need at least {need} items, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("missing ablation variant {0}")]
    MissingVariant(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

fn mismatch(expected: usize, got: usize) -> MetricsError {
    MetricsError::ShapeMismatch { expected, got }
}

fn check_frames(motion: &MotionSequence, traj: &ObjectTrajectory) -> Result<(), MetricsError> {
    if motion.len() != traj.len() {
        return Err(mismatch(traj.len(), motion.len()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// IDF

/// Seeded body-frame points outside the object, at most `shell` from its
/// surface.
pub fn idf_points(object: &ObjectSpec, count: usize, shell: f64, seed: u64) -> Vec<Vector3<f64>> {
    let identity = crate::geometry::Pose::identity();
    let half = object.bounding_radius() + shell;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p = Vector3::from_fn(|_, _| rng.gen_range(-half..half));
        let d = object.signed_distance(&identity, &p);
        if d > 0.0 && d <= shell {
            out.push(p);
        }
    }
    out
}

fn distance_field(joints: &[[Vec<Vector3<f64>>; 2]], points: &[Vector3<f64>], traj: &ObjectTrajectory) -> Vec<f64> {
    let mut out = Vec::with_capacity(joints.len() * points.len());
    for (frame, pose) in joints.iter().zip(&traj.poses) {
        for p in points {
            let w = pose.to_world(p);
            let d = frame
                .iter()
                .flatten()
                .map(|j| (j - w).norm())
                .fold(f64::INFINITY, f64::min);
            out.push(d);
        }
    }
    out
}

/// Mean squared difference of the nearest-joint distance fields of the two
/// motions, sampled around the reference object.
pub fn idf(skel: &Skeleton, generated: &MotionSequence, reference: &Episode) -> Result<f64, MetricsError> {
    check_frames(generated, &reference.trajectory)?;
    check_frames(&reference.motion, &reference.trajectory)?;
    let points = idf_points(&reference.object, IDF_POINTS, IDF_SHELL, IDF_SEED);
    let a = distance_field(&generated.joint_positions(skel)?, &points, &reference.trajectory);
    let b = distance_field(&reference.motion.joint_positions(skel)?, &points, &reference.trajectory);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// Contacts and penetration

/// `[agent][hand]` contact bits per frame: wrist centre within the contact
/// threshold of the surface.
pub fn contact_bits(
    skel: &Skeleton,
    motion: &MotionSequence,
    object: &ObjectSpec,
    traj: &ObjectTrajectory,
) -> Result<Vec<[[bool; 2]; 2]>, MetricsError> {
    check_frames(motion, traj)?;
    let joints = motion.joint_positions(skel)?;
    Ok(joints
        .iter()
        .zip(&traj.poses)
        .map(|(frame, pose)| {
            std::array::from_fn(|a| {
                std::array::from_fn(|h| object.signed_distance(pose, &frame[a][skel.wrist_joints[h]]) <= CONTACT_THRESHOLD)
            })
        })
        .collect())
}

/// Frame-level precision of the generated contact bits against the
/// reference annotations. A generated contact counts as correct when the
/// reference hand is in contact and the generated wrist lies within the
/// contact threshold of the reference wrist placement.
pub fn contact_accuracy(skel: &Skeleton, generated: &MotionSequence, reference: &Episode) -> Result<f64, MetricsError> {
    let (hits, positives, reference_positives) = contact_counts(skel, generated, reference)?;
    if reference_positives == 0 {
        return Err(MetricsError::UndefinedMetric("reference has no contact frames".into()));
    }
    Ok(if positives == 0 { 0.0 } else { hits as f64 / positives as f64 })
}

/// (correct generated contacts, generated contacts, reference contacts).
pub fn contact_counts(
    skel: &Skeleton,
    generated: &MotionSequence,
    reference: &Episode,
) -> Result<(usize, usize, usize), MetricsError> {
    if reference.contacts.len() != reference.trajectory.len() {
        return Err(mismatch(reference.trajectory.len(), reference.contacts.len()));
    }
    let bits = contact_bits(skel, generated, &reference.object, &reference.trajectory)?;
    let joints = generated.joint_positions(skel)?;
    let (mut hits, mut positives, mut reference_positives) = (0, 0, 0);
    for ((frame, annotated), gen) in joints.iter().zip(&reference.contacts).zip(&bits) {
        for a in 0..2 {
            for h in 0..2 {
                let anchor = &annotated.anchors[a][h];
                reference_positives += anchor.s as usize;
                if !gen[a][h] {
                    continue;
                }
                positives += 1;
                let r = skel.joints[skel.wrist_joints[h]].radius;
                let site = anchor.p + anchor.n * r;
                if anchor.s && (frame[a][skel.wrist_joints[h]] - site).norm() <= CONTACT_THRESHOLD {
                    hits += 1;
                }
            }
        }
    }
    Ok((hits, positives, reference_positives))
}

/// Mean over frames and agents of the per-agent penetration depth.
pub fn penetration(
    skel: &Skeleton,
    motion: &MotionSequence,
    object: &ObjectSpec,
    traj: &ObjectTrajectory,
) -> Result<f64, MetricsError> {
    check_frames(motion, traj)?;
    let joints = motion.joint_positions(skel)?;
    let radii = skel.radii();
    let mut total = 0.0;
    for (frame, pose) in joints.iter().zip(&traj.poses) {
        for agent in frame {
            total += penetration_depth(agent, &radii, object, pose);
        }
    }
    Ok(total / (2 * joints.len()).max(1) as f64)
}

// ---------------------------------------------------------------------------
// Features and Fréchet distance

/// Fixed-length summary of one motion in its scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionFeatures(pub Vec<f64>);

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn stats4(values: &[f64]) -> [f64; 4] {
    let (mean, std) = mean_std(values);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [mean, std, min, max]
}

impl MotionFeatures {
    pub fn extract(
        skel: &Skeleton,
        motion: &MotionSequence,
        object: &ObjectSpec,
        traj: &ObjectTrajectory,
    ) -> Result<Self, MetricsError> {
        check_frames(motion, traj)?;
        if motion.len() < 2 {
            return Err(MetricsError::TooFew { need: 2, got: motion.len() });
        }
        let joints = motion.joint_positions(skel)?;
        let mut out = Vec::with_capacity(FEATURE_DIM);

        // joint speed histogram, last bin open-ended
        let mut hist = [0.0; SPEED_BINS];
        let mut count = 0.0;
        for pair in joints.windows(2) {
            for a in 0..2 {
                for (p, q) in pair[0][a].iter().zip(&pair[1][a]) {
                    let speed = (q - p).norm() * motion.frame_rate;
                    let bin = ((speed / SPEED_BIN_WIDTH) as usize).min(SPEED_BINS - 1);
                    hist[bin] += 1.0;
                    count += 1.0;
                }
            }
        }
        out.extend(hist.iter().map(|h| h / count));

        // joint heights, both agents pooled
        for name in HEIGHT_JOINTS {
            let j = skel
                .joint_index(name)
                .ok_or_else(|| MetricsError::InvalidInput(format!("skeleton has no joint {name}")))?;
            let z: Vec<f64> = joints.iter().flat_map(|f| [f[0][j].z, f[1][j].z]).collect();
            let (mean, std) = mean_std(&z);
            out.extend([mean, std, z.iter().copied().fold(f64::NEG_INFINITY, f64::max)]);
        }

        // inter-agent distances
        let pelvis = 0;
        let head = skel.joint_index("head").unwrap_or(pelvis);
        let roots: Vec<f64> = joints.iter().map(|f| (f[0][pelvis] - f[1][pelvis]).norm()).collect();
        let heads: Vec<f64> = joints.iter().map(|f| (f[0][head] - f[1][head]).norm()).collect();
        let wrists: Vec<f64> = joints
            .iter()
            .map(|f| {
                let mut best = f64::INFINITY;
                for &i in &skel.wrist_joints {
                    for &k in &skel.wrist_joints {
                        best = best.min((f[0][i] - f[1][k]).norm());
                    }
                }
                best
            })
            .collect();
        out.extend(stats4(&roots));
        out.extend(stats4(&heads));
        out.extend(stats4(&wrists));

        // wrist-surface distances per hand
        for a in 0..2 {
            for &w in &skel.wrist_joints {
                let d: Vec<f64> = joints
                    .iter()
                    .zip(&traj.poses)
                    .map(|(f, pose)| object.signed_distance(pose, &f[a][w]))
                    .collect();
                let (mean, _) = mean_std(&d);
                let min = d.iter().copied().fold(f64::INFINITY, f64::min);
                let near = d.iter().filter(|&&v| v <= CONTACT_THRESHOLD).count() as f64 / d.len() as f64;
                out.extend([mean, min, near]);
            }
        }
        debug_assert_eq!(out.len(), FEATURE_DIM);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::InvalidInput("non-finite motion feature".into()));
        }
        Ok(MotionFeatures(out))
    }
}

/// Features of many motions sharing the scenes of `episodes`, in order.
pub fn extract_features(
    skel: &Skeleton,
    motions: &[MotionSequence],
    episodes: &[Episode],
) -> Result<Vec<MotionFeatures>, MetricsError> {
    if motions.len() != episodes.len() {
        return Err(mismatch(episodes.len(), motions.len()));
    }
    motions
        .par_iter()
        .zip(episodes)
        .map(|(m, ep)| MotionFeatures::extract(skel, m, &ep.object, &ep.trajectory))
        .collect()
}

fn gaussian_fit(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let mut mean = DVector::zeros(dim);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_column_slice(v) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid_like(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let dim = a.first().map_or(0, Vec::len);
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::TooFew {
            need: 2,
            got: a.len().min(b.len()),
        });
    }
    if dim == 0 {
        return Err(MetricsError::InvalidInput("empty feature vectors".into()));
    }
    if let Some(v) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(mismatch(dim, v.len()));
    }
    let (mu_a, mut cov_a) = gaussian_fit(a, dim);
    let (mu_b, mut cov_b) = gaussian_fit(b, dim);
    if a.len() <= dim || b.len() <= dim {
        log::info!(
            "fid_like: {} and {} items for {dim} features, covariance shrinkage {COVARIANCE_SHRINKAGE} applied",
            a.len(),
            b.len()
        );
        for i in 0..dim {
            cov_a[(i, i)] += COVARIANCE_SHRINKAGE;
            cov_b[(i, i)] += COVARIANCE_SHRINKAGE;
        }
    }
    let root_a = psd_sqrt(&cov_a);
    let cross = psd_sqrt(&(&root_a * &cov_b * &root_a));
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// `fid_like` over motion features.
pub fn fid_features(a: &[MotionFeatures], b: &[MotionFeatures]) -> Result<f64, MetricsError> {
    let a: Vec<Vec<f64>> = a.iter().map(|f| f.0.clone()).collect();
    let b: Vec<Vec<f64>> = b.iter().map(|f| f.0.clone()).collect();
    fid_like(&a, &b)
}

// ---------------------------------------------------------------------------
// Diversity

fn rms_distance(a: &[[Vec<Vector3<f64>>; 2]], b: &[[Vec<Vector3<f64>>; 2]]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (fa, fb) in a.iter().zip(b) {
        for (ja, jb) in fa.iter().flatten().zip(fb.iter().flatten()) {
            total += (ja - jb).norm_squared();
            count += 1;
        }
    }
    (total / count.max(1) as f64).sqrt()
}

/// Mean over unordered pairs of the RMS joint-position distance.
pub fn diversity(skel: &Skeleton, motions: &[MotionSequence]) -> Result<f64, MetricsError> {
    if motions.len() < 2 {
        return Err(MetricsError::TooFew {
            need: 2,
            got: motions.len(),
        });
    }
    let frames = motions[0].len();
    if let Some(m) = motions.iter().find(|m| m.len() != frames) {
        return Err(mismatch(frames, m.len()));
    }
    let joints = motions
        .par_iter()
        .map(|m| m.joint_positions(skel))
        .collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<(usize, usize)> = (0..joints.len())
        .flat_map(|i| (i + 1..joints.len()).map(move |k| (i, k)))
        .collect();
    let distances: Vec<f64> = pairs.par_iter().map(|&(i, k)| rms_distance(&joints[i], &joints[k])).collect();
    Ok(distances.iter().sum::<f64>() / distances.len() as f64)
}

// ---------------------------------------------------------------------------
// Ablation table

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Bps,
    Contact,
    Prior,
    Simulation,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Bps,
        Variant::Contact,
        Variant::Prior,
        Variant::Simulation,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Bps => "+BPS",
            Variant::Contact => "+Contact",
            Variant::Prior => "+Prior",
            Variant::Simulation => "+Simulation",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.label().eq_ignore_ascii_case(s))
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScores {
    pub variant: Variant,
    pub idf: f64,
    /// Absent when no reference episode has a contact frame.
    pub contact_accuracy: Option<f64>,
    pub fid_like: f64,
    pub diversity: f64,
    pub penetration: f64,
}

/// Scores generated motions (world frame, one per episode) against the
/// reference episodes. Contact precision pools all frames of all episodes.
pub fn score_variant(
    skel: &Skeleton,
    variant: Variant,
    generated: &[MotionSequence],
    reference: &[Episode],
) -> Result<VariantScores, MetricsError> {
    if generated.len() != reference.len() {
        return Err(mismatch(reference.len(), generated.len()));
    }
    if reference.is_empty() {
        return Err(MetricsError::TooFew { need: 1, got: 0 });
    }
    let per_episode = generated
        .par_iter()
        .zip(reference)
        .map(|(m, ep)| -> Result<(f64, (usize, usize, usize), f64), MetricsError> {
            Ok((
                idf(skel, m, ep)?,
                contact_counts(skel, m, ep)?,
                penetration(skel, m, &ep.object, &ep.trajectory)?,
            ))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = per_episode.len() as f64;
    let (mut hits, mut positives, mut reference_positives) = (0, 0, 0);
    for (_, (h, p, r), _) in &per_episode {
        hits += h;
        positives += p;
        reference_positives += r;
    }
    let contact_accuracy = match (reference_positives, positives) {
        (0, _) => None,
        (_, 0) => Some(0.0),
        _ => Some(hits as f64 / positives as f64),
    };
    let gen_features = extract_features(skel, generated, reference)?;
    let ref_motions: Vec<MotionSequence> = reference.iter().map(|e| e.motion.clone()).collect();
    let ref_features = extract_features(skel, &ref_motions, reference)?;
    let fid = if generated.len() >= 2 {
        fid_features(&gen_features, &ref_features)?
    } else {
        f64::NAN
    };
    let div = if generated.len() >= 2 { diversity(skel, generated)? } else { 0.0 };
    Ok(VariantScores {
        variant,
        idf: per_episode.iter().map(|r| r.0).sum::<f64>() / n,
        contact_accuracy,
        fid_like: fid,
        diversity: div,
        penetration: per_episode.iter().map(|r| r.2).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<VariantScores>,
}

fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".into()
    }
}

impl AblationReport {
    /// Scores every requested variant; each needs generated motions.
    pub fn build(
        skel: &Skeleton,
        requested: &[Variant],
        generated: &BTreeMap<Variant, Vec<MotionSequence>>,
        reference: &[Episode],
    ) -> Result<Self, MetricsError> {
        let mut rows = Vec::with_capacity(requested.len());
        for &v in requested {
            let motions = generated
                .get(&v)
                .ok_or_else(|| MetricsError::MissingVariant(v.label().into()))?;
            rows.push(score_variant(skel, v, motions, reference)?);
        }
        Ok(AblationReport { rows })
    }

    pub fn row(&self, v: Variant) -> Option<&VariantScores> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,idf,contact_accuracy,fid_like,diversity,penetration\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.variant.label(),
                cell(r.idf),
                r.contact_accuracy.map_or("NA".into(), cell),
                cell(r.fid_like),
                cell(r.diversity),
                cell(r.penetration)
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>10} {:>12} {:>10} {:>10} {:>10}\n",
            "variant", "IDF", "Contact Acc", "FID-like", "Div", "Pene"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>10.4} {:>12} {:>10.4} {:>10.4} {:>10.5}",
                r.variant.label(),
                r.idf,
                r.contact_accuracy.map_or("n/a".into(), |c| format!("{c:.4}")),
                r.fid_like,
                r.diversity,
                r.penetration
            );
        }
        out
    }
}

/// Outcome of one trend check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Contact accuracy of `+Contact` at least `margin` above `+BPS`.
pub fn contact_trend(report: &AblationReport, margin: f64) -> Result<TrendCheck, MetricsError> {
    let before = need(report, Variant::Bps)?.contact_accuracy.unwrap_or(f64::NAN);
    let after = need(report, Variant::Contact)?.contact_accuracy.unwrap_or(f64::NAN);
    Ok(TrendCheck {
        name: "contact guidance raises contact accuracy".into(),
        passed: after - before >= margin,
        detail: format!("{before:.4} -> {after:.4} (need +{margin})"),
    })
}

/// Penetration of `+Simulation` at most `1 − reduction` of `+Prior`.
pub fn penetration_trend(report: &AblationReport, reduction: f64) -> Result<TrendCheck, MetricsError> {
    let before = need(report, Variant::Prior)?.penetration;
    let after = need(report, Variant::Simulation)?.penetration;
    Ok(TrendCheck {
        name: "simulation reduces penetration".into(),
        passed: after <= (1.0 - reduction) * before,
        detail: format!("{before:.5} -> {after:.5} (need <= {:.5})", (1.0 - reduction) * before),
    })
}

/// FID-like of `full` within `tolerance` (relative) of `+Prior`.
pub fn recovery_trend(report: &AblationReport, tolerance: f64) -> Result<TrendCheck, MetricsError> {
    let before = need(report, Variant::Prior)?.fid_like;
    let after = need(report, Variant::Full)?.fid_like;
    Ok(TrendCheck {
        name: "final step recovers FID-like".into(),
        passed: (after - before).abs() <= tolerance * before,
        detail: format!("{before:.4} -> {after:.4} (within {:.0}%)", 100.0 * tolerance),
    })
}

/// FID-like of `+Prior` no more than `tolerance` (relative) above `+Contact`;
/// `improved` reports a strict decrease.
pub fn prior_trend(report: &AblationReport, tolerance: f64) -> Result<(TrendCheck, bool), MetricsError> {
    let before = need(report, Variant::Contact)?.fid_like;
    let after = need(report, Variant::Prior)?.fid_like;
    Ok((
        TrendCheck {
            name: "priors do not worsen FID-like".into(),
            passed: after <= (1.0 + tolerance) * before,
            detail: format!("{before:.4} -> {after:.4} (need <= {:.4})", (1.0 + tolerance) * before),
        },
        after < before,
    ))
}

fn need(report: &AblationReport, v: Variant) -> Result<&VariantScores, MetricsError> {
    report.row(v).ok_or_else(|| MetricsError::MissingVariant(v.label().into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_episode, EpisodeParams};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn skel() -> Skeleton {
        Skeleton::default_21()
    }

    fn episode(seed: u64) -> Episode {
        let params = EpisodeParams {
            frames: 24,
            ..Default::default()
        };
        generate_episode(seed, &params).unwrap()
    }

    fn shifted(m: &MotionSequence, by: Vector3<f64>) -> MotionSequence {
        let mut out = m.clone();
        for f in &mut out.frames {
            for a in f.iter_mut() {
                a.gamma += by;
            }
        }
        out
    }

    fn gaussian_set(n: usize, dim: usize, mean: &[f64], scale: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..dim)
                    .map(|i| mean[i] + scale[i] * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn idf_is_zero_on_identical_motion() {
        let ep = episode(1);
        assert_eq!(idf(&skel(), &ep.motion, &ep).unwrap(), 0.0);
    }

    #[test]
    fn idf_grows_with_shift() {
        let ep = episode(2);
        let mut last = -1.0;
        for k in 0..=6 {
            let s = 0.05 * k as f64;
            let v = idf(&skel(), &shifted(&ep.motion, Vector3::new(s, 0.0, 0.0)), &ep).unwrap();
            assert!(v > last, "shift {s}: {v} <= {last}");
            last = v;
        }
        assert!(idf(&skel(), &shifted(&ep.motion, Vector3::new(0.1, 0.0, 0.0)), &ep).unwrap() > 0.0);
    }

    #[test]
    fn idf_points_are_seeded_and_in_shell() {
        let ep = episode(3);
        let a = idf_points(&ep.object, 512, 0.5, 0);
        assert_eq!(a, idf_points(&ep.object, 512, 0.5, 0));
        let id = crate::geometry::Pose::identity();
        assert!(a.iter().all(|p| {
            let d = ep.object.signed_distance(&id, p);
            d > 0.0 && d <= 0.5
        }));
        let m = shifted(&ep.motion, Vector3::new(0.0, 0.2, 0.0));
        assert_eq!(idf(&skel(), &m, &ep).unwrap(), idf(&skel(), &m, &ep).unwrap());
    }

    #[test]
    fn oracle_episodes_are_self_consistent() {
        let s = skel();
        for seed in 0..12 {
            let ep = episode(seed);
            assert_eq!(contact_accuracy(&s, &ep.motion, &ep).unwrap(), 1.0, "seed {seed}");
            let pen = penetration(&s, &ep.motion, &ep.object, &ep.trajectory).unwrap();
            assert!(pen < 5e-3, "seed {seed}: {pen}");
        }
    }

    #[test]
    fn flipped_contacts_score_zero() {
        let s = skel();
        let ep = episode(4);
        // move every agent far away: no generated contact matches
        let far = shifted(&ep.motion, Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(contact_accuracy(&s, &far, &ep).unwrap(), 0.0);
        // contacts only where the reference has none
        let mut inverted = ep.clone();
        for f in &mut inverted.contacts {
            for a in f.anchors.iter_mut() {
                for h in a.iter_mut() {
                    h.s = !h.s;
                }
            }
        }
        let bits = contact_bits(&s, &ep.motion, &ep.object, &ep.trajectory).unwrap();
        let agree = bits
            .iter()
            .zip(&ep.contacts)
            .all(|(b, c)| (0..2).all(|a| (0..2).all(|h| b[a][h] == c.anchors[a][h].s)));
        assert!(agree);
        if inverted.contacts.iter().any(|f| f.anchors.iter().flatten().any(|h| h.s)) {
            assert_eq!(contact_accuracy(&s, &ep.motion, &inverted).unwrap(), 0.0);
        }
    }

    #[test]
    fn contact_accuracy_without_reference_contacts_is_undefined() {
        let s = skel();
        let mut ep = episode(5);
        for f in &mut ep.contacts {
            for a in f.anchors.iter_mut() {
                for h in a.iter_mut() {
                    h.s = false;
                }
            }
        }
        assert!(matches!(
            contact_accuracy(&s, &ep.motion, &ep),
            Err(MetricsError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let a = gaussian_set(200, 64, &[0.3; 64], &[0.7; 64], 1);
        assert!(fid_like(&a, &a).unwrap() < 1e-8);
        let small = gaussian_set(20, 64, &[0.3; 64], &[0.7; 64], 2);
        assert!(fid_like(&small, &small).unwrap() < 1e-8);
    }

    #[test]
    fn fid_of_shifted_unit_gaussians_is_squared_mean_gap() {
        // equal empirical covariances, means exactly one apart
        let a = gaussian_set(500, 1, &[0.0], &[1.0], 3);
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 1.0]).collect();
        assert!((fid_like(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        let c = gaussian_set(20000, 1, &[1.0], &[1.0], 4);
        let d = gaussian_set(20000, 1, &[0.0], &[1.0], 5);
        assert!((fid_like(&c, &d).unwrap() - 1.0).abs() < 0.05);
    }

    /// Squared 2-Wasserstein distance between two empirical 1-D samples of
    /// equal size: match sorted values.
    fn sorted_w2(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn fid_matches_sampled_transport_cost() {
        // independent coordinates: the transport cost splits per coordinate
        let dim = 4;
        let (ma, sa) = ([0.0, 1.0, -0.5, 2.0], [1.0, 0.5, 2.0, 1.5]);
        let (mb, sb) = ([0.5, 0.0, 0.5, 2.0], [1.5, 0.5, 1.0, 0.5]);
        let a = gaussian_set(20000, dim, &ma, &sa, 6);
        let b = gaussian_set(20000, dim, &mb, &sb, 7);
        let oracle: f64 = (0..dim)
            .map(|i| sorted_w2(a.iter().map(|v| v[i]).collect(), b.iter().map(|v| v[i]).collect()))
            .sum();
        let got = fid_like(&a, &b).unwrap();
        assert!((got - oracle).abs() < 0.05 * oracle, "{got} vs {oracle}");
    }

    #[test]
    fn fid_rejects_bad_sets() {
        assert!(matches!(fid_like(&[vec![1.0]], &[vec![1.0], vec![2.0]]), Err(MetricsError::TooFew { .. })));
        assert!(matches!(
            fid_like(&[vec![1.0], vec![2.0]], &[vec![1.0, 0.0], vec![2.0, 0.0]]),
            Err(MetricsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn features_have_fixed_dimension() {
        let s = skel();
        for seed in 0..3 {
            let ep = episode(seed);
            let f = MotionFeatures::extract(&s, &ep.motion, &ep.object, &ep.trajectory).unwrap();
            assert_eq!(f.0.len(), FEATURE_DIM);
            assert!(f.0.iter().all(|v| v.is_finite()));
            let hist: f64 = f.0[..SPEED_BINS].iter().sum();
            assert!((hist - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diversity_examples() {
        let s = skel();
        let ep = episode(6);
        let m = ep.motion.clone();
        assert_eq!(diversity(&s, &[m.clone(), m.clone()]).unwrap(), 0.0);
        let moved = shifted(&m, Vector3::new(0.0, 0.6, 0.8));
        assert!((diversity(&s, &[m.clone(), moved.clone()]).unwrap() - 1.0).abs() < 1e-12);
        let other = episode(7).motion;
        let set = [m.clone(), moved.clone(), other.clone()];
        let rev = [other, moved, m];
        assert!((diversity(&s, &set).unwrap() - diversity(&s, &rev).unwrap()).abs() < 1e-12);
        assert!(matches!(diversity(&s, &set[..1]), Err(MetricsError::TooFew { .. })));
    }

    fn small_report() -> (Vec<Episode>, BTreeMap<Variant, Vec<MotionSequence>>) {
        let eps: Vec<Episode> = (0..3).map(episode).collect();
        let mut generated = BTreeMap::new();
        generated.insert(Variant::Baseline, eps.iter().map(|e| shifted(&e.motion, Vector3::new(0.1, 0.0, 0.0))).collect());
        generated.insert(Variant::Full, eps.iter().map(|e| e.motion.clone()).collect());
        (eps, generated)
    }

    #[test]
    fn ablation_report_rows_and_formats() {
        let s = skel();
        let (eps, generated) = small_report();
        let one = AblationReport::build(&s, &[Variant::Baseline], &generated, &eps).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert_eq!(one.to_csv().lines().count(), 2);
        let both = AblationReport::build(&s, &[Variant::Baseline, Variant::Full], &generated, &eps).unwrap();
        let (base, full) = (&both.rows[0], &both.rows[1]);
        assert!(full.contact_accuracy.unwrap() >= base.contact_accuracy.unwrap());
        assert_eq!(full.idf, 0.0);
        assert!(full.fid_like < 1e-8);
        assert!(!both.to_text().contains("+Simulation") && both.to_text().contains("full"));
        let again = AblationReport::build(&s, &[Variant::Baseline, Variant::Full], &generated, &eps).unwrap();
        assert_eq!(both.to_csv(), again.to_csv());
        assert!(matches!(
            AblationReport::build(&s, &[Variant::Prior], &generated, &eps),
            Err(MetricsError::MissingVariant(_))
        ));
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.label()), Some(v));
        }
        assert_eq!(Variant::parse("nope"), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn metrics_are_non_negative(seed in 0u64..40, dx in -0.3f64..0.3, dz in -0.2f64..0.2) {
            let s = skel();
            let ep = episode(seed % 6);
            let m = shifted(&ep.motion, Vector3::new(dx, 0.0, dz));
            prop_assert!(idf(&s, &m, &ep).unwrap() >= 0.0);
            prop_assert!(penetration(&s, &m, &ep.object, &ep.trajectory).unwrap() >= 0.0);
            let acc = contact_accuracy(&s, &m, &ep).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            let a = gaussian_set(10, 3, &[0.0; 3], &[1.0; 3], seed);
            let b = gaussian_set(12, 3, &[dx; 3], &[1.0 + dz; 3], seed + 100);
            prop_assert!(fid_like(&a, &b).unwrap() >= 0.0);
        }
    }
}
