//! Training stages and the ablation run, shared by the subcommands and the
//! acceptance suite.

use std::time::Instant;

use cofm_core::advprior::{train_priors, PriorTraining};
use cofm_core::flowgen::{canonical_frame, canonicalize, prepare_examples, train_flow, transform_motion, FlowModel};
use cofm_core::kinematics::{MotionSequence, Skeleton};
use cofm_core::metrics::{contact_trend, penetration_trend, prior_trend, recovery_trend, AblationReport, TrendCheck, Variant};
use cofm_core::pipeline::{ablation_report, generate_variants, GenerateConfig, Models};
use cofm_core::strategy::{train_strategy, StrategyModel};
use cofm_core::synthdata::{generate_corpus, Episode};

use crate::config::RunConfig;
use crate::error::{internal, CliResult};

/// Seed offsets of the corpora of one run.
pub const TRAIN_SEED_STRIDE: u64 = 100_000;
pub const TEST_SEED_OFFSET: u64 = 50_000;
pub const VALIDATION_SEED_OFFSET: u64 = 90_000;
/// Noise seed offset of the generations that train the priors.
pub const FAKE_SEED_OFFSET: u64 = 1000;

pub struct Corpora {
    pub train: Vec<Episode>,
    pub validation: Vec<Episode>,
    pub test: Vec<Episode>,
}

/// Train, validation and test corpora of `cfg`, disjoint by seed.
pub fn synth_corpora(cfg: &RunConfig) -> CliResult<Corpora> {
    let base = cfg.seed * TRAIN_SEED_STRIDE;
    let d = &cfg.data;
    let make = |n, offset| generate_corpus(n, base + offset, &d.episode).map_err(internal);
    Ok(Corpora {
        train: make(d.episodes, 0)?,
        validation: make(d.validation_episodes, VALIDATION_SEED_OFFSET)?,
        test: make(d.test_episodes, TEST_SEED_OFFSET)?,
    })
}

pub fn train_flow_model(skel: &Skeleton, train: &[Episode], val: &[Episode], cfg: &RunConfig) -> CliResult<FlowModel> {
    let joints = skel.joint_count();
    let tr = prepare_examples(train, joints, &cfg.flow.condition).map_err(internal)?;
    let va = prepare_examples(val, joints, &cfg.flow.condition).map_err(internal)?;
    let trainer = train_flow(skel, &tr, &va, &cfg.flow, None).map_err(internal)?;
    if let Some(last) = trainer.history.last() {
        log::info!("flow: {} epochs, loss {:.4}, val {:?}", trainer.history.len(), last.total, last.val_flow);
    }
    Ok(trainer.model)
}

pub fn train_strategy_model(train: &[Episode], val: &[Episode], cfg: &RunConfig) -> CliResult<StrategyModel> {
    let t = train_strategy(train, val, &cfg.strategy).map_err(internal)?;
    log::info!("strategy: affordance val AUC {:?}", t.val_auc);
    Ok(t.model)
}

/// +Contact generations for `episodes`, in each episode's canonical frame.
pub fn prior_fakes(skel: &Skeleton, models: &Models, episodes: &[Episode], cfg: &RunConfig) -> CliResult<Vec<MotionSequence>> {
    let generated = generate_variants(
        models,
        skel,
        episodes,
        &[Variant::Contact],
        &cfg.generate,
        cfg.seed + FAKE_SEED_OFFSET,
    )
    .map_err(internal)?;
    let motions = generated.get(&Variant::Contact).cloned().unwrap_or_default();
    Ok(motions
        .iter()
        .zip(episodes)
        .map(|(m, ep)| transform_motion(m, &canonical_frame(&ep.trajectory)))
        .collect())
}

/// Trains both priors with the canonicalized episodes as real data.
pub fn train_prior_models(
    skel: &Skeleton,
    body_real: &[Episode],
    interaction_real: &[Episode],
    fakes: &[MotionSequence],
    cfg: &RunConfig,
) -> CliResult<PriorTraining> {
    let canon = |eps: &[Episode]| eps.iter().map(|ep| canonicalize(ep).motion).collect::<Vec<_>>();
    let t = train_priors(&canon(body_real), &canon(interaction_real), fakes, skel.joint_count(), &cfg.prior.config)
        .map_err(internal)?;
    for w in &t.warnings {
        log::warn!("prior: {w:?}");
    }
    Ok(t)
}

/// Trains every model of `cfg` on the training corpus.
pub fn train_all(skel: &Skeleton, corpora: &Corpora, cfg: &RunConfig) -> CliResult<Models> {
    let flow = train_flow_model(skel, &corpora.train, &corpora.validation, cfg)?;
    let strategy = train_strategy_model(&corpora.train, &corpora.validation, cfg)?;
    let mut models = Models {
        flow,
        strategy: Some(strategy),
        priors: None,
    };
    let n = cfg.prior.fakes.min(corpora.train.len());
    let fakes = prior_fakes(skel, &models, &corpora.train[..n], cfg)?;
    let t = train_prior_models(skel, &corpora.train, &corpora.train, &fakes, cfg)?;
    log::info!("priors: body audit {:?}, interaction audit {:?}", t.body, t.interaction);
    models.priors = Some(t.priors);
    Ok(models)
}

/// Ablation run for one seed together with its trend checks.
pub struct TrendRun {
    pub seed: u64,
    pub report: AblationReport,
    pub contact: TrendCheck,
    pub penetration: TrendCheck,
    pub recovery: TrendCheck,
    pub prior: TrendCheck,
    /// Whether +Prior has a strictly lower FID-like score than +Contact.
    pub prior_improved: bool,
    pub train_seconds: f64,
    pub generate_seconds: f64,
}

pub const CONTACT_MARGIN: f64 = 0.03;
pub const PENETRATION_REDUCTION: f64 = 0.5;
pub const RECOVERY_TOLERANCE: f64 = 0.15;
pub const PRIOR_TOLERANCE: f64 = 0.05;

impl TrendRun {
    pub fn checks(&self) -> [&TrendCheck; 4] {
        [&self.contact, &self.penetration, &self.recovery, &self.prior]
    }

    /// All four per-seed checks hold.
    pub fn passed(&self) -> bool {
        self.checks().iter().all(|c| c.passed)
    }
}

/// Scores every ablation row of `models` on `episodes`.
pub fn trend_checks(
    skel: &Skeleton,
    models: &Models,
    episodes: &[Episode],
    generate: &GenerateConfig,
    seed: u64,
) -> CliResult<(AblationReport, [TrendCheck; 4], bool)> {
    let report = ablation_report(models, skel, episodes, &Variant::ALL, generate, seed).map_err(internal)?;
    let contact = contact_trend(&report, CONTACT_MARGIN).map_err(internal)?;
    let penetration = penetration_trend(&report, PENETRATION_REDUCTION).map_err(internal)?;
    let recovery = recovery_trend(&report, RECOVERY_TOLERANCE).map_err(internal)?;
    let (prior, improved) = prior_trend(&report, PRIOR_TOLERANCE).map_err(internal)?;
    Ok((report, [contact, penetration, recovery, prior], improved))
}

/// Synthesizes the corpora of `cfg`, trains all models and runs the
/// ablation on the test corpus.
pub fn trend_run(cfg: &RunConfig) -> CliResult<TrendRun> {
    let skel = Skeleton::default_21();
    let start = Instant::now();
    let corpora = synth_corpora(cfg)?;
    let models = train_all(&skel, &corpora, cfg)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let (report, [contact, penetration, recovery, prior], prior_improved) =
        trend_checks(&skel, &models, &corpora.test, &cfg.generate, cfg.seed)?;
    Ok(TrendRun {
        seed: cfg.seed,
        report,
        contact,
        penetration,
        recovery,
        prior,
        prior_improved,
        train_seconds,
        generate_seconds: start.elapsed().as_secs_f64(),
    })
}
