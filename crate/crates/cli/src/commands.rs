//! Subcommands of the `cofm` binary.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use cofm_core::advprior::Priors;
use cofm_core::flowgen::{
    canonical_frame, canonicalize, motion_to_csv, read_motion, transform_motion, transform_trajectory, write_motion,
    FlowModel,
};
use cofm_core::geometry::{ObjectSpec, ObjectTrajectory};
use cofm_core::kinematics::{MotionSequence, Skeleton};
use cofm_core::metrics::{AblationReport, Variant};
use cofm_core::nnet::Checkpoint;
use cofm_core::pipeline::{generate, generate_variants, Models, Stages};
use cofm_core::stabsim::{refine_motion, RefineScene};
use cofm_core::strategy::StrategyModel;
use cofm_core::synthdata::{generate_corpus, read_corpus, write_corpus, Episode};

use crate::checks::{invariant_suite, Check};
use crate::config::{echo_run, RunConfig};
use crate::error::{internal, invalid, CliError, CliResult};
use crate::workflow;

#[derive(Debug, Parser)]
#[command(name = "cofm", version, about = "Cooperative two-person object carrying motion generation")]
pub struct Cli {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic episode corpus.
    Synth(SynthArgs),
    /// Train the flow model.
    TrainFlow(TrainArgs),
    /// Train the affordance net and contact denoiser.
    TrainStrategy(TrainArgs),
    /// Train the body and interaction priors.
    TrainPrior(TrainPriorArgs),
    /// Generate motions for one scene or a whole corpus.
    Generate(GenerateArgs),
    /// Physics refinement of a generated motion.
    Refine(RefineArgs),
    /// Score generated motions against a reference corpus.
    Eval(EvalArgs),
    /// Convert motions, corpora or trajectories to CSV or JSON.
    Export(ExportArgs),
    /// Run the invariant suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub frame_rate: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each episode as object JSON, trajectory and motion files.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Validation corpus.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainPriorArgs {
    /// Real motions for the body prior.
    #[arg(long)]
    pub body_real: PathBuf,
    /// Real paired motions for the interaction prior.
    #[arg(long)]
    pub int_real: PathBuf,
    /// Generated motions: a corpus, or a directory of motions paired with
    /// the episodes of `--fake-ref`.
    #[arg(long)]
    pub fake: PathBuf,
    #[arg(long)]
    pub fake_ref: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Flow model checkpoint.
    #[arg(long, alias = "flow")]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub strategy: Option<PathBuf>,
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Scene mode: object JSON.
    #[arg(long, requires = "traj", conflicts_with = "corpus")]
    pub object: Option<PathBuf>,
    /// Scene mode: object trajectory.
    #[arg(long, requires = "object")]
    pub traj: Option<PathBuf>,
    /// Corpus mode: one motion per episode.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated ablation rows, or `all`.
    #[arg(long)]
    pub variants: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Contact guidance weight.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Prior guidance weight.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Rollouts of the physics step inside generation.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub motion: PathBuf,
    #[arg(long)]
    pub object: PathBuf,
    #[arg(long)]
    pub traj: PathBuf,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for the search trace and per-frame loads as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generated motions: a directory from `generate`, or a corpus.
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Row label of generations that carry none.
    #[arg(long, default_value = "full")]
    pub variant: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// A motion (.cmfm), corpus (.cmfc) or trajectory (.bin).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub format: Format,
    /// Standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Scratch directory for the determinism run; a temporary one otherwise.
    #[arg(long)]
    pub work: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let threads = match cli.threads {
        Some(0) => return Err(invalid("--threads must be at least 1")),
        Some(n) => n,
        None => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(internal)?;
    pool.install(|| dispatch(cli.command, cfg))
}

fn dispatch(command: Command, mut cfg: RunConfig) -> CliResult<()> {
    match command {
        Command::Synth(a) => {
            if let Some(n) = a.episodes {
                cfg.data.episodes = n;
            }
            if let Some(f) = a.frames {
                cfg.data.episode.frames = f;
            }
            if let Some(r) = a.frame_rate {
                cfg.data.episode.frame_rate = r;
            }
            cfg.validate()?;
            synth(&a, &cfg)
        }
        Command::TrainFlow(a) => {
            if let Some(e) = a.epochs {
                cfg.flow.train.epochs = e;
            }
            cfg.validate()?;
            train_flow(&a, &cfg)
        }
        Command::TrainStrategy(a) => {
            if let Some(e) = a.epochs {
                cfg.strategy.denoiser.train.epochs = e;
            }
            cfg.validate()?;
            train_strategy(&a, &cfg)
        }
        Command::TrainPrior(a) => {
            if let Some(e) = a.epochs {
                cfg.prior.config.train.epochs = e;
            }
            cfg.validate()?;
            train_prior(&a, &cfg)
        }
        Command::Generate(a) => {
            let g = &mut cfg.generate;
            if let Some(s) = a.steps {
                g.steps = s;
            }
            if let Some(v) = a.gamma {
                g.contact.gamma_guid = v;
            }
            if let Some(v) = a.eta {
                g.prior_weight = v;
            }
            if let Some(b) = a.budget {
                g.refine.budget = b;
            }
            cfg.validate()?;
            generate_cmd(&a, &cfg)
        }
        Command::Refine(a) => {
            if let Some(b) = a.budget {
                cfg.refine.budget = b;
            }
            cfg.validate()?;
            refine(&a, &cfg)
        }
        Command::Eval(a) => eval(&a, &cfg),
        Command::Export(a) => export(&a),
        Command::Selftest(a) => selftest(&a),
    }
}

// ---------------------------------------------------------------------------
// File helpers

fn load_corpus(path: &Path) -> CliResult<Vec<Episode>> {
    let eps = read_corpus(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if eps.is_empty() {
        return Err(invalid(format!("{}: empty corpus", path.display())));
    }
    Ok(eps)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_object(path: &Path) -> CliResult<ObjectSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    ObjectSpec::from_json(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_trajectory(path: &Path) -> CliResult<ObjectTrajectory> {
    ObjectTrajectory::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_motion(path: &Path) -> CliResult<MotionSequence> {
    read_motion(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn create_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            std::fs::create_dir_all(p).map_err(|e| invalid(format!("{}: {e}", p.display())))
        }
        _ => Ok(()),
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    create_parent(path)?;
    std::fs::write(path, text).map_err(|e| internal(format!("{}: {e}", path.display())))
}

fn parse_variants(spec: &str) -> CliResult<Vec<Variant>> {
    if spec.eq_ignore_ascii_case("all") {
        return Ok(Variant::ALL.to_vec());
    }
    let mut out = Vec::new();
    for s in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v = Variant::parse(s).ok_or_else(|| {
            let known: Vec<_> = Variant::ALL.iter().map(|v| v.label()).collect();
            invalid(format!("unknown variant `{s}` (expected one of {} or all)", known.join(", ")))
        })?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(invalid("no variants given"));
    }
    Ok(out)
}

/// Name of the file of episode `i` in a generation directory.
pub fn episode_file(i: usize) -> String {
    format!("episode_{i:04}.cmfm")
}

pub const VARIANT_FILE: &str = "variant.txt";

// ---------------------------------------------------------------------------
// synth

fn synth(a: &SynthArgs, cfg: &RunConfig) -> CliResult<()> {
    let eps = generate_corpus(cfg.data.episodes, cfg.seed, &cfg.data.episode).map_err(internal)?;
    create_parent(&a.out)?;
    write_corpus(&eps, &a.out).map_err(|e| internal(format!("{}: {e}", a.out.display())))?;
    echo_run(&a.out, "synth", cfg, &[])?;
    if let Some(dir) = &a.scenes {
        create_dir(dir)?;
        for (i, ep) in eps.iter().enumerate() {
            let stem = dir.join(format!("scene_{i:04}"));
            let with = |ext: &str| stem.with_extension(ext);
            write_text(&with("object.json"), &ep.object.to_json())?;
            ep.trajectory.save(&with("traj.bin")).map_err(internal)?;
            write_motion(&ep.motion, &with("cmfm")).map_err(internal)?;
        }
        echo_run(dir, "synth", cfg, &[])?;
    }
    println!("wrote {} episodes to {}", eps.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// training

fn validation_corpus(val: &Option<PathBuf>) -> CliResult<Vec<Episode>> {
    val.as_deref().map(load_corpus).transpose().map(Option::unwrap_or_default)
}

fn train_inputs(a: &TrainArgs) -> Vec<(&'static str, &Path)> {
    let mut inputs = vec![("corpus", a.corpus.as_path())];
    if let Some(v) = &a.val {
        inputs.push(("val", v.as_path()));
    }
    inputs
}

fn train_flow(a: &TrainArgs, cfg: &RunConfig) -> CliResult<()> {
    let skel = Skeleton::default_21();
    let train = load_corpus(&a.corpus)?;
    let val = validation_corpus(&a.val)?;
    let model = workflow::train_flow_model(&skel, &train, &val, cfg)?;
    create_parent(&a.out)?;
    model.to_checkpoint().save(&a.out).map_err(internal)?;
    echo_run(&a.out, "train-flow", cfg, &train_inputs(a))?;
    println!("saved flow model to {}", a.out.display());
    Ok(())
}

fn train_strategy(a: &TrainArgs, cfg: &RunConfig) -> CliResult<()> {
    let train = load_corpus(&a.corpus)?;
    let val = validation_corpus(&a.val)?;
    let model = workflow::train_strategy_model(&train, &val, cfg)?;
    create_parent(&a.out)?;
    model.to_checkpoint().save(&a.out).map_err(internal)?;
    echo_run(&a.out, "train-strategy", cfg, &train_inputs(a))?;
    println!("saved contact strategy to {}", a.out.display());
    Ok(())
}

/// Generated motions in the canonical frames of their scenes.
fn load_fakes(fake: &Path, fake_ref: Option<&Path>) -> CliResult<Vec<MotionSequence>> {
    if fake.is_dir() {
        let reference = fake_ref.ok_or_else(|| invalid("--fake-ref is required when --fake is a directory"))?;
        let eps = load_corpus(reference)?;
        let motions = read_generation_dir(fake, eps.len())?;
        Ok(motions
            .iter()
            .zip(&eps)
            .map(|(m, ep)| transform_motion(m, &canonical_frame(&ep.trajectory)))
            .collect())
    } else {
        Ok(load_corpus(fake)?.iter().map(|ep| canonicalize(ep).motion).collect())
    }
}

fn train_prior(a: &TrainPriorArgs, cfg: &RunConfig) -> CliResult<()> {
    let skel = Skeleton::default_21();
    let body = load_corpus(&a.body_real)?;
    let paired = load_corpus(&a.int_real)?;
    let fakes = load_fakes(&a.fake, a.fake_ref.as_deref())?;
    let t = workflow::train_prior_models(&skel, &body, &paired, &fakes, cfg)?;
    create_parent(&a.out)?;
    t.priors.to_checkpoint().save(&a.out).map_err(internal)?;
    let mut inputs = vec![
        ("body_real", a.body_real.as_path()),
        ("int_real", a.int_real.as_path()),
        ("fake", a.fake.as_path()),
    ];
    if let Some(r) = &a.fake_ref {
        inputs.push(("fake_ref", r.as_path()));
    }
    echo_run(&a.out, "train-prior", cfg, &inputs)?;
    for w in &t.warnings {
        eprintln!("warning: {w:?}");
    }
    println!("saved priors to {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

fn load_models(a: &GenerateArgs) -> CliResult<Models> {
    let flow = FlowModel::from_checkpoint(&load_checkpoint(&a.ckpt)?).map_err(invalid)?;
    let strategy = a
        .strategy
        .as_deref()
        .map(|p| StrategyModel::from_checkpoint(&load_checkpoint(p)?).map_err(invalid))
        .transpose()?;
    let priors = a
        .prior
        .as_deref()
        .map(|p| Priors::from_checkpoint(&load_checkpoint(p)?).map_err(invalid))
        .transpose()?;
    Ok(Models { flow, strategy, priors })
}

/// The most complete row the loaded models support.
fn default_variant(models: &Models) -> Variant {
    match (&models.strategy, &models.priors) {
        (Some(_), Some(_)) => Variant::Full,
        (Some(_), None) => Variant::Contact,
        _ => Variant::Bps,
    }
}

fn check_models(models: &Models, variants: &[Variant]) -> CliResult<()> {
    for &v in variants {
        let s = Stages::of(v);
        if s.contact && models.strategy.is_none() {
            return Err(invalid(format!("{} needs --strategy", v.label())));
        }
        if s.prior && models.priors.is_none() {
            return Err(invalid(format!("{} needs --prior", v.label())));
        }
    }
    Ok(())
}

fn generate_inputs(a: &GenerateArgs) -> Vec<(&'static str, &Path)> {
    let mut inputs = vec![("ckpt", a.ckpt.as_path())];
    for (name, p) in [
        ("strategy", &a.strategy),
        ("prior", &a.prior),
        ("object", &a.object),
        ("traj", &a.traj),
        ("corpus", &a.corpus),
    ] {
        if let Some(p) = p {
            inputs.push((name, p.as_path()));
        }
    }
    inputs
}

fn generate_cmd(a: &GenerateArgs, cfg: &RunConfig) -> CliResult<()> {
    let skel = Skeleton::default_21();
    let models = load_models(a)?;
    let variants = match &a.variants {
        Some(s) => parse_variants(s)?,
        None => vec![default_variant(&models)],
    };
    check_models(&models, &variants)?;
    match (&a.object, &a.traj, &a.corpus) {
        (Some(obj), Some(traj), None) => {
            let [variant] = variants[..] else {
                return Err(invalid("scene mode generates exactly one variant"));
            };
            let object = load_object(obj)?;
            let trajectory = load_trajectory(traj)?;
            let g = generate(&models, &skel, &object, &trajectory, Stages::of(variant), &cfg.generate, cfg.seed)
                .map_err(internal)?;
            // +Simulation is the refined rollout the final step started from
            let motion = match (variant, g.refined) {
                (Variant::Simulation, Some(r)) => r,
                _ => g.motion,
            };
            create_parent(&a.out)?;
            write_motion(&motion, &a.out).map_err(internal)?;
            if let Some(reason) = g.simulation_skipped {
                eprintln!("warning: physics step skipped: {reason}");
            }
            echo_run(&a.out, "generate", cfg, &generate_inputs(a))?;
            println!("wrote {} motion to {}", variant.label(), a.out.display());
            Ok(())
        }
        (None, None, Some(corpus)) => {
            let eps = load_corpus(corpus)?;
            let generated = generate_variants(&models, &skel, &eps, &variants, &cfg.generate, cfg.seed).map_err(internal)?;
            write_generations(&a.out, &generated)?;
            echo_run(&a.out, "generate", cfg, &generate_inputs(a))?;
            println!("wrote {} variant(s) x {} episodes to {}", generated.len(), eps.len(), a.out.display());
            Ok(())
        }
        _ => Err(invalid("give either --object and --traj, or --corpus")),
    }
}

fn write_variant_dir(dir: &Path, v: Variant, motions: &[MotionSequence]) -> CliResult<()> {
    create_dir(dir)?;
    write_text(&dir.join(VARIANT_FILE), &format!("{}\n", v.label()))?;
    for (i, m) in motions.iter().enumerate() {
        write_motion(m, &dir.join(episode_file(i))).map_err(internal)?;
    }
    Ok(())
}

/// One directory of motions per variant; a single variant writes straight
/// into `out`.
fn write_generations(out: &Path, generated: &BTreeMap<Variant, Vec<MotionSequence>>) -> CliResult<()> {
    if generated.len() == 1 {
        let (v, motions) = generated.iter().next().expect("one variant");
        return write_variant_dir(out, *v, motions);
    }
    for (v, motions) in generated {
        write_variant_dir(&out.join(v.label()), *v, motions)?;
    }
    Ok(())
}

fn read_generation_dir(dir: &Path, expected: usize) -> CliResult<Vec<MotionSequence>> {
    (0..expected).map(|i| load_motion(&dir.join(episode_file(i)))).collect()
}

fn read_variant_label(dir: &Path) -> CliResult<Option<Variant>> {
    let path = dir.join(VARIANT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Variant::parse(text.trim())
        .map(Some)
        .ok_or_else(|| invalid(format!("{}: unknown variant `{}`", path.display(), text.trim())))
}

// ---------------------------------------------------------------------------
// refine

fn refine(a: &RefineArgs, cfg: &RunConfig) -> CliResult<()> {
    let skel = Skeleton::default_21();
    let motion = load_motion(&a.motion)?;
    let object = load_object(&a.object)?;
    let trajectory = load_trajectory(&a.traj)?;
    if motion.len() != trajectory.poses.len() {
        return Err(invalid(format!(
            "motion has {} frames but the trajectory has {}",
            motion.len(),
            trajectory.poses.len()
        )));
    }
    let g = canonical_frame(&trajectory);
    let scene = RefineScene {
        skeleton: skel,
        object,
        trajectory: transform_trajectory(&trajectory, &g),
        contacts: None,
    };
    let r = refine_motion(&transform_motion(&motion, &g), &scene, &cfg.refine).map_err(internal)?;
    let refined = transform_motion(&r.motion, &g.inverse());
    create_parent(&a.out)?;
    write_motion(&refined, &a.out).map_err(internal)?;
    if let Some(dir) = &a.trace {
        create_dir(dir)?;
        let mut search = String::from("generation,best_cost\n");
        for (i, c) in r.search.trace.iter().enumerate() {
            search.push_str(&format!("{i},{c}\n"));
        }
        write_text(&dir.join("search.csv"), &search)?;
        write_text(&dir.join("loads.csv"), &r.rollout.loads_csv())?;
        echo_run(dir, "refine", cfg, &[("motion", &a.motion), ("object", &a.object), ("traj", &a.traj)])?;
    }
    echo_run(&a.out, "refine", cfg, &[("motion", &a.motion), ("object", &a.object), ("traj", &a.traj)])?;
    println!(
        "cost {:.4} -> {:.4} after {} rollouts ({:.0}% diverged)",
        r.initial_cost,
        r.cost.total,
        r.search.evaluations,
        100.0 * r.diverged_fraction
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn load_generations(path: &Path, fallback: Variant, expected: usize) -> CliResult<BTreeMap<Variant, Vec<MotionSequence>>> {
    let mut out = BTreeMap::new();
    if !path.is_dir() {
        let eps = load_corpus(path)?;
        out.insert(fallback, eps.into_iter().map(|e| e.motion).collect());
        return Ok(out);
    }
    if let Some(v) = read_variant_label(path)? {
        out.insert(v, read_generation_dir(path, expected)?);
        return Ok(out);
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        if let Some(v) = read_variant_label(&d)? {
            out.insert(v, read_generation_dir(&d, expected)?);
        }
    }
    if out.is_empty() {
        if path.join(episode_file(0)).exists() {
            out.insert(fallback, read_generation_dir(path, expected)?);
        } else {
            return Err(invalid(format!("{}: no generated motions found", path.display())));
        }
    }
    Ok(out)
}

fn eval(a: &EvalArgs, cfg: &RunConfig) -> CliResult<()> {
    let skel = Skeleton::default_21();
    let fallback = Variant::parse(&a.variant).ok_or_else(|| invalid(format!("unknown variant `{}`", a.variant)))?;
    let reference = load_corpus(&a.reference)?;
    let generated = load_generations(&a.gen, fallback, reference.len())?;
    for (v, motions) in &generated {
        if motions.len() != reference.len() {
            return Err(invalid(format!(
                "{}: {} motions for {} reference episodes",
                v.label(),
                motions.len(),
                reference.len()
            )));
        }
    }
    let variants: Vec<Variant> = generated.keys().copied().collect();
    let report = AblationReport::build(&skel, &variants, &generated, &reference).map_err(invalid)?;
    write_text(&a.out, &report.to_csv())?;
    echo_run(&a.out, "eval", cfg, &[("gen", &a.gen), ("ref", &a.reference)])?;
    print!("{}", report.to_text());
    if Variant::ALL.iter().all(|v| generated.contains_key(v)) {
        let [c, p, r, q] = [
            cofm_core::metrics::contact_trend(&report, workflow::CONTACT_MARGIN),
            cofm_core::metrics::penetration_trend(&report, workflow::PENETRATION_REDUCTION),
            cofm_core::metrics::recovery_trend(&report, workflow::RECOVERY_TOLERANCE),
            cofm_core::metrics::prior_trend(&report, workflow::PRIOR_TOLERANCE).map(|t| t.0),
        ];
        for t in [c, p, r, q] {
            let t = t.map_err(internal)?;
            println!("{} {}: {}", if t.passed { "PASS" } else { "FAIL" }, t.name, t.detail);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// export

fn trajectory_csv(traj: &ObjectTrajectory) -> String {
    let mut out = String::from("frame,x,y,z,r00,r01,r02,r10,r11,r12,r20,r21,r22\n");
    for (t, p) in traj.poses.iter().enumerate() {
        let r = &p.rotation;
        let cells: Vec<String> = [p.translation.x, p.translation.y, p.translation.z]
            .into_iter()
            .chain((0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])))
            .map(|v| v.to_string())
            .collect();
        out.push_str(&format!("{t},{}\n", cells.join(",")));
    }
    out
}

fn corpus_csv(skel: &Skeleton, eps: &[Episode]) -> CliResult<String> {
    let mut out = String::from("episode,frame,agent,joint,x,y,z\n");
    for (i, ep) in eps.iter().enumerate() {
        let csv = motion_to_csv(&ep.motion, skel).map_err(internal)?;
        for line in csv.lines().skip(1) {
            out.push_str(&format!("{i},{line}\n"));
        }
    }
    Ok(out)
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(internal)
}

fn export(a: &ExportArgs) -> CliResult<()> {
    let skel = Skeleton::default_21();
    let ext = a.input.extension().and_then(|e| e.to_str()).unwrap_or_default();
    let text = match (ext, a.format) {
        ("cmfm", Format::Csv) => motion_to_csv(&load_motion(&a.input)?, &skel).map_err(internal)?,
        ("cmfm", Format::Json) => to_json(&load_motion(&a.input)?)?,
        ("cmfc", Format::Csv) => corpus_csv(&skel, &load_corpus(&a.input)?)?,
        ("cmfc", Format::Json) => {
            let eps = load_corpus(&a.input)?;
            let docs: Vec<serde_json::Value> = eps
                .iter()
                .map(|ep| {
                    serde_json::json!({
                        "object": ep.object,
                        "trajectory": ep.trajectory,
                        "motion": ep.motion,
                    })
                })
                .collect();
            to_json(&docs)?
        }
        ("bin", Format::Csv) => trajectory_csv(&load_trajectory(&a.input)?),
        ("bin", Format::Json) => to_json(&load_trajectory(&a.input)?)?,
        _ => {
            return Err(invalid(format!(
                "{}: expected a .cmfm motion, .cmfc corpus or .bin trajectory",
                a.input.display()
            )))
        }
    };
    match &a.out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// selftest

fn selftest(a: &SelftestArgs) -> CliResult<()> {
    let scratch = tempfile::tempdir().map_err(internal)?;
    let root = a.work.clone().unwrap_or_else(|| scratch.path().to_path_buf());
    let exec = |args: &[String]| run(std::iter::once("cofm".to_string()).chain(args.iter().cloned()));
    let checks: Vec<Check> = invariant_suite(&root, &exec);
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Internal(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}
