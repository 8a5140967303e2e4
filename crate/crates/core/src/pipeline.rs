//! End-to-end generation for one scene: contact strategy, guided flow
//! sampling and the physics hook, with the switches the ablation rows need.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advprior::{PriorError, PriorGuidance, Priors};
use crate::flowgen::{
    canonical_frame, decode, sample_state, to_world, transform_trajectory, Condition, FlowError, FlowModel, Guidance,
};
use crate::geometry::{ObjectSpec, ObjectTrajectory};
use crate::kinematics::{MotionSequence, Skeleton};
use crate::metrics::{AblationReport, MetricsError, Variant};
use crate::stabsim::{RefineConfig, RefineScene, Refinement, SimError, SimulationHook};
use crate::strategy::{sample_strategy, ContactGuidance, GuidanceConfig, StrategyError, StrategyModel};
use crate::synthdata::{ContactFrame, Episode};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing model for {0}")]
    MissingModel(&'static str),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Trained components. Strategy and priors are optional.
#[derive(Debug, Clone)]
pub struct Models {
    pub flow: FlowModel,
    pub strategy: Option<StrategyModel>,
    pub priors: Option<Priors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    /// Euler steps K.
    pub steps: usize,
    pub contact: GuidanceConfig,
    /// Prior guidance weight η.
    pub prior_weight: f64,
    pub refine: RefineConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            steps: 10,
            contact: GuidanceConfig::default(),
            prior_weight: 0.05,
            refine: RefineConfig::default(),
        }
    }
}

/// Which parts of the pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub bps: bool,
    pub contact: bool,
    pub prior: bool,
    pub simulation: bool,
}

impl Stages {
    pub const FULL: Stages = Stages {
        bps: true,
        contact: true,
        prior: true,
        simulation: true,
    };

    /// Stages of an ablation row; rows add one stage each.
    pub fn of(v: Variant) -> Stages {
        let rank = Variant::ALL.iter().position(|&x| x == v).unwrap_or(0);
        Stages {
            bps: rank >= 1,
            contact: rank >= 2,
            prior: rank >= 3,
            simulation: rank >= 4,
        }
    }
}

/// One generated motion in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub motion: MotionSequence,
    /// The refined rollout the last Euler step started from.
    pub refined: Option<MotionSequence>,
    /// The refinement behind `refined`, in the canonical frame of the
    /// trajectory.
    pub refinement: Option<Refinement>,
    /// Strategy anchors in world coordinates.
    pub anchors: Option<Vec<ContactFrame>>,
    /// Why the physics hook passed the state through.
    pub simulation_skipped: Option<String>,
}

/// Generates a motion for `object` following `trajectory` (world frame).
pub fn generate(
    models: &Models,
    skel: &Skeleton,
    object: &ObjectSpec,
    trajectory: &ObjectTrajectory,
    stages: Stages,
    cfg: &GenerateConfig,
    seed: u64,
) -> Result<Generated, PipelineError> {
    let flow = &models.flow;
    let g = canonical_frame(trajectory);
    let local = transform_trajectory(trajectory, &g);
    let anchors = if stages.contact {
        let strategy = models.strategy.as_ref().ok_or(PipelineError::MissingModel("contact strategy"))?;
        Some(sample_strategy(strategy, object, &local, seed)?)
    } else {
        None
    };
    let cond = Condition::new(object, &local, anchors.as_deref(), &flow.condition)?.with_blocks(stages.bps, anchors.is_some());
    let features = cond.features(flow.condition.bps_dim);

    let mut contact = anchors
        .as_ref()
        .map(|a| ContactGuidance::new(skel, flow.layout, a.clone(), cfg.contact));
    let priors = if stages.prior {
        Some(models.priors.as_ref().ok_or(PipelineError::MissingModel("adversarial priors"))?)
    } else {
        None
    };
    let mut prior = priors
        .map(|p| PriorGuidance::new(p, flow.layout, cfg.prior_weight))
        .transpose()?;
    let mut sim = if stages.simulation {
        let scene = RefineScene {
            skeleton: skel.clone(),
            object: object.clone(),
            trajectory: local.clone(),
            contacts: anchors.clone(),
        };
        Some(SimulationHook::new(flow, features.clone(), scene, cfg.refine.clone())?)
    } else {
        None
    };

    let mut hooks: Vec<&mut dyn Guidance> = Vec::new();
    if let Some(h) = contact.as_mut() {
        hooks.push(h);
    }
    if let Some(h) = prior.as_mut() {
        hooks.push(h);
    }
    if let Some(h) = sim.as_mut() {
        hooks.push(h);
    }
    let state = sample_state(flow, &cond, seed, cfg.steps, &mut hooks)?;
    let motion = to_world(&decode(&flow.layout, &state.x)?, trajectory);
    let (refinement, simulation_skipped) = match sim {
        Some(h) => (h.last, h.skipped),
        None => (None, None),
    };
    let refined = refinement.as_ref().map(|r| to_world(&r.motion, trajectory));
    let inverse = g.inverse();
    Ok(Generated {
        motion,
        refined,
        refinement,
        anchors: anchors.map(|a| crate::flowgen::transform_contacts(&a, &inverse)),
        simulation_skipped,
    })
}

/// Noise seed of episode `index` under run seed `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

fn needs(v: Variant, models: &Models) -> Result<(), PipelineError> {
    let s = Stages::of(v);
    if s.contact && models.strategy.is_none() {
        return Err(PipelineError::MissingModel("contact strategy"));
    }
    if s.prior && models.priors.is_none() {
        return Err(PipelineError::MissingModel("adversarial priors"));
    }
    Ok(())
}

/// Motions of every requested variant for every episode. Episode `i` uses
/// the same noise seed in every variant; `+Simulation` and `full` share one
/// run, read before and after the last Euler step.
pub fn generate_variants(
    models: &Models,
    skel: &Skeleton,
    episodes: &[Episode],
    variants: &[Variant],
    cfg: &GenerateConfig,
    seed: u64,
) -> Result<BTreeMap<Variant, Vec<MotionSequence>>, PipelineError> {
    for &v in variants {
        needs(v, models)?;
    }
    let mut out = BTreeMap::new();
    let mut runs: Vec<Variant> = variants.iter().copied().filter(|&v| v != Variant::Simulation).collect();
    if variants.contains(&Variant::Simulation) && !runs.contains(&Variant::Full) {
        runs.push(Variant::Full);
    }
    runs.sort();
    runs.dedup();
    for v in runs {
        let results = episodes
            .par_iter()
            .enumerate()
            .map(|(i, ep)| generate(models, skel, &ep.object, &ep.trajectory, Stages::of(v), cfg, episode_seed(seed, i)))
            .collect::<Result<Vec<_>, _>>()?;
        if v == Variant::Full && variants.contains(&Variant::Simulation) {
            let before = results
                .iter()
                .map(|r| {
                    if r.refined.is_none() {
                        log::warn!("no refined rollout, +Simulation row uses the final motion");
                    }
                    r.refined.clone().unwrap_or_else(|| r.motion.clone())
                })
                .collect();
            out.insert(Variant::Simulation, before);
        }
        if variants.contains(&v) {
            out.insert(v, results.into_iter().map(|r| r.motion).collect());
        }
    }
    Ok(out)
}

/// Generates and scores the requested ablation rows on `episodes`.
pub fn ablation_report(
    models: &Models,
    skel: &Skeleton,
    episodes: &[Episode],
    variants: &[Variant],
    cfg: &GenerateConfig,
    seed: u64,
) -> Result<AblationReport, PipelineError> {
    let generated = generate_variants(models, skel, episodes, variants, cfg, seed)?;
    Ok(AblationReport::build(skel, variants, &generated, episodes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowgen::ConditionConfig;
    use crate::synthdata::{generate_corpus, EpisodeParams};

    fn tiny() -> (Skeleton, Vec<Episode>, Models) {
        let params = EpisodeParams {
            frames: 16,
            frame_rate: 8.0,
            ..Default::default()
        };
        let eps = generate_corpus(3, 40, &params).unwrap();
        let skel = Skeleton::default_21();
        let layout = crate::flowgen::FlowLayout::new(16, 21, 8.0);
        let cond = ConditionConfig { bps_dim: 8, bps_seed: 0 };
        let flow = FlowModel::new(layout, cond, &[16], 3);
        (
            skel,
            eps,
            Models {
                flow,
                strategy: None,
                priors: None,
            },
        )
    }

    #[test]
    fn stages_accumulate_down_the_table() {
        assert_eq!(
            Stages::of(Variant::Baseline),
            Stages {
                bps: false,
                contact: false,
                prior: false,
                simulation: false
            }
        );
        assert!(Stages::of(Variant::Bps).bps && !Stages::of(Variant::Bps).contact);
        assert!(Stages::of(Variant::Prior).prior && !Stages::of(Variant::Prior).simulation);
        assert_eq!(Stages::of(Variant::Simulation), Stages::FULL);
        assert_eq!(Stages::of(Variant::Full), Stages::FULL);
    }

    #[test]
    fn missing_models_are_reported() {
        let (skel, eps, models) = tiny();
        let cfg = GenerateConfig::default();
        let err = generate_variants(&models, &skel, &eps, &[Variant::Baseline, Variant::Contact], &cfg, 0).unwrap_err();
        assert!(matches!(err, PipelineError::MissingModel("contact strategy")));
        let err = generate(&models, &skel, &eps[0].object, &eps[0].trajectory, Stages::FULL, &cfg, 0).unwrap_err();
        assert!(matches!(err, PipelineError::MissingModel(_)));
    }

    #[test]
    fn unguided_generation_is_world_framed_and_deterministic() {
        let (skel, eps, models) = tiny();
        let cfg = GenerateConfig::default();
        let stages = Stages::of(Variant::Bps);
        let a = generate(&models, &skel, &eps[1].object, &eps[1].trajectory, stages, &cfg, 9).unwrap();
        let b = generate(&models, &skel, &eps[1].object, &eps[1].trajectory, stages, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.motion.len(), 16);
        assert!(a.refined.is_none() && a.anchors.is_none());
        let report = ablation_report(&models, &skel, &eps, &[Variant::Baseline, Variant::Bps], &cfg, 1).unwrap();
        assert_eq!(report.rows.len(), 2);
        let again = ablation_report(&models, &skel, &eps, &[Variant::Baseline, Variant::Bps], &cfg, 1).unwrap();
        assert_eq!(report.to_csv(), again.to_csv());
    }
}
