//! Adversarial motion priors.
//!
//! Two discriminators score decoded motion: [`BodyPrior`] looks at one agent
//! at one frame (joint rotations and shape), [`InteractionPrior`] at both
//! agents at one frame expressed relative to the first agent's root, which
//! makes it blind to any rigid motion of the pair. A sequence's log-score
//! under a prior is the mean of `log D` over its items.
//!
//! The priors enter generation in two places: as the generator-side training
//! term `-Σ_k log D_k(x̂1)` ([`MotionPrior`]) and as a velocity correction
//! `η Σ_k ∇ log D_k` during sampling ([`PriorGuidance`]).

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowgen::{encode, AdversarialPrior, FlowError, FlowLayout, FlowState, Guidance, MotionPrior};
use crate::kinematics::{mat_mul, mat_vec, sub3, transpose, Mat3, MotionSequence, SHAPE_DIM};
use crate::nnet::{sigmoid, AdamW, Checkpoint, CyclicCosine, Mlp, NnetError, Real, Tape, TrainConfig, Var};

/// Channels of the shared per-joint rotation embedding.
pub const EMBED_CHANNELS: usize = 8;
/// Width of the body prior's shape branch output.
pub const SHAPE_FEATURES: usize = 16;
/// Per-prior norm limit of the guidance gradient.
pub const GRAD_CLIP: f64 = 10.0;
const LOGIT_CLAMP: f64 = 30.0;
/// Fake-score variance below which training reports mode collapse.
pub const MODE_COLLAPSE_VARIANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

fn mismatch(expected: usize, got: usize) -> PriorError {
    PriorError::ShapeMismatch { expected, got }
}

// ---------------------------------------------------------------------------
// Features

fn push_rot6d<S: Real>(out: &mut Vec<S>, m: &Mat3<S>) {
    out.extend_from_slice(&[m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]);
}

/// Body prior input of agent `a` at frame `t`: the re-orthonormalized 6D
/// block of every joint, then the shape vector.
pub fn body_features<S: Real>(layout: &FlowLayout, x: &[S], t: usize, a: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(layout.joints * 6 + SHAPE_DIM);
    for j in 0..layout.joints {
        push_rot6d(&mut out, &layout.rotation(x, t, a, j));
    }
    out.extend_from_slice(&layout.shape(x, a));
    out
}

pub fn body_input_width(joints: usize) -> usize {
    joints * 6 + SHAPE_DIM
}

/// Interaction prior input at frame `t`: non-root joint blocks of both
/// agents, `R₁ᵀR₂` as 6D, `R₁ᵀ(γ₂ − γ₁)` and both shape vectors.
pub fn interaction_features<S: Real>(layout: &FlowLayout, x: &[S], t: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(interaction_input_width(layout.joints));
    for a in 0..2 {
        for j in 1..layout.joints {
            push_rot6d(&mut out, &layout.rotation(x, t, a, j));
        }
    }
    let r1t = transpose(&layout.rotation(x, t, 0, 0));
    let r2 = layout.rotation(x, t, 1, 0);
    push_rot6d(&mut out, &mat_mul(&r1t, &r2));
    let d = sub3(&layout.root_translation(x, t, 1), &layout.root_translation(x, t, 0));
    out.extend_from_slice(&mat_vec(&r1t, &d));
    out.extend_from_slice(&layout.shape(x, 0));
    out.extend_from_slice(&layout.shape(x, 1));
    out
}

pub fn interaction_input_width(joints: usize) -> usize {
    2 * (joints - 1) * 6 + 6 + 3 + 2 * SHAPE_DIM
}

// ---------------------------------------------------------------------------
// Discriminators

/// A network mapping feature columns to realness logits.
pub trait Discriminator: Sync {
    fn input_width(&self) -> usize;
    fn logits(&self, input: &DMatrix<f64>) -> Result<Vec<f64>, NnetError>;
    /// Gradient of `Σ_b d_logits[b]·z_b` with respect to the parameters
    /// (flat) and the input columns.
    fn backward(&self, input: &DMatrix<f64>, d_logits: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), NnetError>;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, flat: &[f64]) -> Result<(), NnetError>;

    fn param_count(&self) -> usize {
        self.params().len()
    }

    /// Realness in (0, 1); logits are clamped so the score never rounds to
    /// exactly 0 or 1.
    fn scores(&self, input: &DMatrix<f64>) -> Result<Vec<f64>, NnetError> {
        Ok(self
            .logits(input)?
            .into_iter()
            .map(|z| sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
            .collect())
    }
}

/// Per-frame, per-agent realness of a body configuration.
///
/// A small network embeds every joint's 6D block with the same weights; the
/// embeddings are laid side by side (so joint identity survives), joined by a
/// shape branch and scored by a head.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyPrior {
    pub joints: usize,
    pub embed: Mlp,
    pub shape: Mlp,
    pub head: Mlp,
}

impl BodyPrior {
    pub fn new(joints: usize, hidden: &[usize], seed: u64) -> Self {
        let mut head = vec![joints * EMBED_CHANNELS + SHAPE_FEATURES];
        head.extend_from_slice(hidden);
        head.push(1);
        BodyPrior {
            joints,
            embed: Mlp::new(&[6, 16, EMBED_CHANNELS], seed, 1.0),
            shape: Mlp::new(&[SHAPE_DIM, 16, SHAPE_FEATURES], seed.wrapping_add(1), 1.0),
            head: Mlp::new(&head, seed.wrapping_add(2), 0.1),
        }
    }

    fn check(&self, input: &DMatrix<f64>) -> Result<(), NnetError> {
        if input.nrows() != self.input_width() {
            return Err(NnetError::ShapeMismatch {
                expected: self.input_width(),
                got: input.nrows(),
            });
        }
        Ok(())
    }

    /// Joint blocks as one column per (item, joint) and shapes per item.
    fn split(&self, input: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let b = input.ncols();
        let rot_rows = self.joints * 6;
        let mut rot = Vec::with_capacity(rot_rows * b);
        let mut shape = Vec::with_capacity(SHAPE_DIM * b);
        for col in input.column_iter() {
            rot.extend_from_slice(&col.as_slice()[..rot_rows]);
            shape.extend_from_slice(&col.as_slice()[rot_rows..]);
        }
        (
            DMatrix::from_vec(6, self.joints * b, rot),
            DMatrix::from_vec(SHAPE_DIM, b, shape),
        )
    }

    fn head_input(&self, embedded: &DMatrix<f64>, shaped: &DMatrix<f64>) -> DMatrix<f64> {
        let b = shaped.ncols();
        let e_rows = self.joints * EMBED_CHANNELS;
        let mut data = Vec::with_capacity((e_rows + SHAPE_FEATURES) * b);
        let flat = embedded.as_slice();
        for i in 0..b {
            data.extend_from_slice(&flat[i * e_rows..(i + 1) * e_rows]);
            data.extend_from_slice(shaped.column(i).as_slice());
        }
        DMatrix::from_vec(e_rows + SHAPE_FEATURES, b, data)
    }
}

impl Discriminator for BodyPrior {
    fn input_width(&self) -> usize {
        body_input_width(self.joints)
    }

    fn logits(&self, input: &DMatrix<f64>) -> Result<Vec<f64>, NnetError> {
        self.check(input)?;
        let (rot, shape) = self.split(input);
        let h = self.head_input(&self.embed.forward(&rot)?, &self.shape.forward(&shape)?);
        Ok(self.head.forward(&h)?.as_slice().to_vec())
    }

    fn backward(&self, input: &DMatrix<f64>, d_logits: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), NnetError> {
        self.check(input)?;
        let b = input.ncols();
        let (rot, shape) = self.split(input);
        let ec = self.embed.forward_cached(&rot)?;
        let sc = self.shape.forward_cached(&shape)?;
        let h = self.head_input(ec.output(), sc.output());
        let hc = self.head.forward_cached(&h)?;
        let (g_head, d_h) = self.head.backward(&hc, &DMatrix::from_row_slice(1, b, d_logits));
        let e_rows = self.joints * EMBED_CHANNELS;
        let mut d_embed = Vec::with_capacity(e_rows * b);
        let mut d_shape = Vec::with_capacity(SHAPE_FEATURES * b);
        for col in d_h.column_iter() {
            d_embed.extend_from_slice(&col.as_slice()[..e_rows]);
            d_shape.extend_from_slice(&col.as_slice()[e_rows..]);
        }
        let (g_embed, d_rot) = self
            .embed
            .backward(&ec, &DMatrix::from_vec(EMBED_CHANNELS, self.joints * b, d_embed));
        let (g_shape, d_beta) = self.shape.backward(&sc, &DMatrix::from_vec(SHAPE_FEATURES, b, d_shape));
        let rot_rows = self.joints * 6;
        let mut d_input = DMatrix::zeros(self.input_width(), b);
        for i in 0..b {
            let mut col = d_input.column_mut(i);
            let col = col.as_mut_slice();
            col[..rot_rows].copy_from_slice(&d_rot.as_slice()[i * rot_rows..(i + 1) * rot_rows]);
            col[rot_rows..].copy_from_slice(d_beta.column(i).as_slice());
        }
        let mut grads = g_embed;
        grads.extend(g_shape);
        grads.extend(g_head);
        Ok((grads, d_input))
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.embed.params();
        p.extend(self.shape.params());
        p.extend(self.head.params());
        p
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<(), NnetError> {
        let (ne, ns) = (self.embed.param_count(), self.shape.param_count());
        let expected = ne + ns + self.head.param_count();
        if flat.len() != expected {
            return Err(NnetError::ShapeMismatch {
                expected,
                got: flat.len(),
            });
        }
        self.embed.set_params(&flat[..ne])?;
        self.shape.set_params(&flat[ne..ne + ns])?;
        self.head.set_params(&flat[ne + ns..])
    }
}

/// Per-frame realness of the pair's relative configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionPrior {
    pub joints: usize,
    pub net: Mlp,
}

impl InteractionPrior {
    pub fn new(joints: usize, hidden: &[usize], seed: u64) -> Self {
        let mut widths = vec![interaction_input_width(joints)];
        widths.extend_from_slice(hidden);
        widths.push(1);
        InteractionPrior {
            joints,
            net: Mlp::new(&widths, seed, 0.1),
        }
    }
}

impl Discriminator for InteractionPrior {
    fn input_width(&self) -> usize {
        interaction_input_width(self.joints)
    }

    fn logits(&self, input: &DMatrix<f64>) -> Result<Vec<f64>, NnetError> {
        Ok(self.net.forward(input)?.as_slice().to_vec())
    }

    fn backward(&self, input: &DMatrix<f64>, d_logits: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), NnetError> {
        let cache = self.net.forward_cached(input)?;
        Ok(self
            .net
            .backward(&cache, &DMatrix::from_row_slice(1, input.ncols(), d_logits)))
    }

    fn params(&self) -> Vec<f64> {
        self.net.params()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<(), NnetError> {
        self.net.set_params(flat)
    }
}

fn columns(items: &[Vec<f64>], width: usize) -> DMatrix<f64> {
    let mut data = Vec::with_capacity(items.len() * width);
    for it in items {
        data.extend_from_slice(it);
    }
    DMatrix::from_vec(width, items.len(), data)
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Non-saturating discriminator objective from logits: the mean over real
/// items of `-log D` plus the mean over fake items of `-log(1 − D)`.
pub fn discriminator_loss(real_logits: &[f64], fake_logits: &[f64]) -> f64 {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&z| f(z)).sum::<f64>() / v.len().max(1) as f64;
    mean(real_logits, &|z| softplus(-z)) + mean(fake_logits, &|z| softplus(z))
}

/// Generator-side term `-Σ_k log D_k` from per-prior realness scores.
pub fn generator_loss(scores: &[f64]) -> f64 {
    -scores.iter().map(|s| s.ln()).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Priors on flow states

/// The enabled discriminators.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Priors {
    pub body: Option<BodyPrior>,
    pub interaction: Option<InteractionPrior>,
}

/// Feature columns of every body item of a state.
fn body_items<S: Real>(layout: &FlowLayout, x: &[S]) -> Vec<Vec<S>> {
    (0..layout.frames)
        .flat_map(|t| (0..2).map(move |a| (t, a)))
        .map(|(t, a)| body_features(layout, x, t, a))
        .collect()
}

fn interaction_items<S: Real>(layout: &FlowLayout, x: &[S]) -> Vec<Vec<S>> {
    (0..layout.frames).map(|t| interaction_features(layout, x, t)).collect()
}

/// Mean `log D` over recorded items as one tape node.
fn mean_log_score_on_tape<'t>(
    disc: &dyn Discriminator,
    tape: &'t Tape,
    items: &[Vec<Var<'t>>],
) -> Result<Var<'t>, NnetError> {
    let width = disc.input_width();
    let values: Vec<Vec<f64>> = items.iter().map(|it| it.iter().map(|v| v.value()).collect()).collect();
    let input = columns(&values, width);
    let z = disc.logits(&input)?;
    // d log σ(z) / dz = 1 − σ(z)
    let d: Vec<f64> = z.iter().map(|&z| sigmoid(-z)).collect();
    let (_, dx) = disc.backward(&input, &d)?;
    let n = items.len() as f64;
    let mut partials = Vec::with_capacity(items.len() * width);
    let mut value = 0.0;
    for (b, it) in items.iter().enumerate() {
        value -= softplus(-z[b]);
        partials.extend(it.iter().zip(dx.column(b).iter()).map(|(v, g)| (*v, g / n)));
    }
    Ok(tape.custom(value / n, &partials))
}

fn mean_log_score(disc: &dyn Discriminator, items: &[Vec<f64>]) -> Result<f64, NnetError> {
    let z = disc.logits(&columns(items, disc.input_width()))?;
    Ok(-z.iter().map(|&z| softplus(-z)).sum::<f64>() / z.len() as f64)
}

impl Priors {
    fn check(&self, layout: &FlowLayout, x_len: usize) -> Result<(), PriorError> {
        if x_len != layout.dim() {
            return Err(mismatch(layout.dim(), x_len));
        }
        let joints = [
            self.body.as_ref().map(|b| b.joints),
            self.interaction.as_ref().map(|i| i.joints),
        ];
        if let Some(j) = joints.into_iter().flatten().find(|&j| j != layout.joints) {
            return Err(mismatch(j, layout.joints));
        }
        Ok(())
    }

    /// Mean `log D` of each enabled prior, body first.
    pub fn log_scores(&self, layout: &FlowLayout, x: &[f64]) -> Result<Vec<f64>, PriorError> {
        self.check(layout, x.len())?;
        let mut out = Vec::new();
        if let Some(b) = &self.body {
            out.push(mean_log_score(b, &body_items(layout, x))?);
        }
        if let Some(i) = &self.interaction {
            out.push(mean_log_score(i, &interaction_items(layout, x))?);
        }
        Ok(out)
    }

    /// Mean `log D` of each enabled prior with its gradient with respect
    /// to the state.
    pub fn log_score_gradients(&self, layout: &FlowLayout, x: &[f64]) -> Result<Vec<(f64, Vec<f64>)>, PriorError> {
        self.check(layout, x.len())?;
        let mut out = Vec::new();
        let discs: [Option<(&dyn Discriminator, bool)>; 2] = [
            self.body.as_ref().map(|b| (b as &dyn Discriminator, true)),
            self.interaction.as_ref().map(|i| (i as &dyn Discriminator, false)),
        ];
        for (disc, is_body) in discs.into_iter().flatten() {
            let tape = Tape::new();
            let vars = tape.vars(x);
            let items = if is_body {
                body_items(layout, &vars)
            } else {
                interaction_items(layout, &vars)
            };
            let score = mean_log_score_on_tape(disc, &tape, &items)?;
            let g = tape.gradient(score)?;
            out.push((score.value(), g.wrt_all(&vars)));
        }
        Ok(out)
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_none() && self.interaction.is_none()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut nets = Vec::new();
        if let Some(b) = &self.body {
            nets.push(("body_embed".to_string(), b.embed.clone()));
            nets.push(("body_shape".to_string(), b.shape.clone()));
            nets.push(("body_head".to_string(), b.head.clone()));
        }
        if let Some(i) = &self.interaction {
            nets.push(("interaction".to_string(), i.net.clone()));
        }
        let joints = self
            .body
            .as_ref()
            .map(|b| b.joints)
            .or(self.interaction.as_ref().map(|i| i.joints));
        Checkpoint {
            metadata: serde_json::json!({
                "kind": "prior",
                "joints": joints,
                "body": self.body.is_some(),
                "interaction": self.interaction.is_some(),
            }),
            nets,
            ..Default::default()
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PriorError> {
        let bad = |m: &str| PriorError::Nnet(NnetError::BadCheckpoint(m.into()));
        if ck.metadata["kind"] != "prior" {
            return Err(bad("not a prior checkpoint"));
        }
        let joints = ck.metadata["joints"].as_u64().map(|j| j as usize);
        let net = |name: &str| ck.net(name).cloned().ok_or_else(|| bad(&format!("missing network `{name}`")));
        let mut priors = Priors::default();
        if ck.metadata["body"] == true {
            let joints = joints.ok_or_else(|| bad("missing joint count"))?;
            let body = BodyPrior {
                joints,
                embed: net("body_embed")?,
                shape: net("body_shape")?,
                head: net("body_head")?,
            };
            let ok = body.embed.widths.first() == Some(&6)
                && body.embed.widths.last() == Some(&EMBED_CHANNELS)
                && body.shape.widths.first() == Some(&SHAPE_DIM)
                && body.shape.widths.last() == Some(&SHAPE_FEATURES)
                && body.head.widths.first() == Some(&(joints * EMBED_CHANNELS + SHAPE_FEATURES))
                && body.head.widths.last() == Some(&1);
            if !ok {
                return Err(bad("body prior widths do not fit together"));
            }
            priors.body = Some(body);
        }
        if ck.metadata["interaction"] == true {
            let joints = joints.ok_or_else(|| bad("missing joint count"))?;
            let net = net("interaction")?;
            if net.widths.first() != Some(&interaction_input_width(joints)) || net.widths.last() != Some(&1) {
                return Err(bad("interaction prior widths do not fit the joint count"));
            }
            priors.interaction = Some(InteractionPrior { joints, net });
        }
        Ok(priors)
    }
}

impl MotionPrior for Priors {
    fn neg_log_score<'t>(&self, tape: &'t Tape, layout: &FlowLayout, x: &[Var<'t>]) -> Result<Var<'t>, NnetError> {
        let mut total = tape.constant(0.0);
        if let Some(b) = &self.body {
            total = total - mean_log_score_on_tape(b, tape, &body_items(layout, x))?;
        }
        if let Some(i) = &self.interaction {
            total = total - mean_log_score_on_tape(i, tape, &interaction_items(layout, x))?;
        }
        Ok(total)
    }
}

/// Generator-side prior term `-Σ_k log D_k(x̂1)` of a decoded state.
pub fn prior_training_loss(priors: &Priors, layout: &FlowLayout, xhat: &[f64]) -> Result<f64, PriorError> {
    Ok(-priors.log_scores(layout, xhat)?.iter().sum::<f64>())
}

// ---------------------------------------------------------------------------
// Guidance

/// Scales `g` down to `limit` if its norm exceeds it. Returns the norm
/// before clipping.
pub fn clip_norm(g: &mut [f64], limit: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > limit {
        let s = limit / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

/// Sampler hook adding `η Σ_k clip(∇ log D_k(x_τ))` to the velocity.
pub struct PriorGuidance<'a> {
    pub priors: &'a Priors,
    pub layout: FlowLayout,
    pub eta: f64,
}

impl<'a> PriorGuidance<'a> {
    pub fn new(priors: &'a Priors, layout: FlowLayout, eta: f64) -> Result<Self, PriorError> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(PriorError::InvalidConfig(format!("eta must be finite and non-negative, got {eta}")));
        }
        Ok(PriorGuidance { priors, layout, eta })
    }

    /// The velocity correction at `x`, before scaling by η.
    pub fn direction(&self, x: &[f64]) -> Result<Vec<f64>, PriorError> {
        let mut total = vec![0.0; x.len()];
        for (_, mut g) in self.priors.log_score_gradients(&self.layout, x)? {
            if g.iter().any(|v| !v.is_finite()) {
                continue;
            }
            clip_norm(&mut g, GRAD_CLIP);
            total.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
        }
        Ok(total)
    }
}

impl Guidance for PriorGuidance<'_> {
    fn name(&self) -> &str {
        "prior"
    }

    fn adjust_velocity(&mut self, _step: usize, state: &FlowState, velocity: &mut [f64]) -> Result<(), String> {
        if self.eta == 0.0 || self.priors.is_empty() {
            return Ok(());
        }
        let d = self.direction(&state.x).map_err(|e| e.to_string())?;
        velocity.iter_mut().zip(&d).for_each(|(v, g)| *v += self.eta * g);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub train: TrainConfig,
    pub body_hidden: Vec<usize>,
    pub interaction_hidden: Vec<usize>,
    pub use_body: bool,
    pub use_interaction: bool,
    /// Share of every corpus held out for the accuracy audit.
    pub holdout: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 64,
                weight_decay: 1e-4,
                epochs: 10,
                seed: 0,
                cycle_steps: 2000,
                min_lr_ratio: 0.1,
            },
            body_hidden: vec![128, 64],
            interaction_hidden: vec![128, 128],
            use_body: true,
            use_interaction: true,
            holdout: 0.2,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), PriorError> {
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(PriorError::InvalidConfig("holdout must lie in [0, 1)".into()));
        }
        if self.body_hidden.iter().chain(&self.interaction_hidden).any(|&h| h == 0) {
            return Err(PriorError::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PriorWarning {
    /// Generated samples all receive nearly the same score.
    ModeCollapse { prior: String, variance: f64 },
}

/// Held-out audit of one discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorAudit {
    /// Share of held-out items classified correctly at D = 0.5.
    pub accuracy: f64,
    pub loss: f64,
    pub fake_score_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorTraining {
    pub priors: Priors,
    pub body: Option<PriorAudit>,
    pub interaction: Option<PriorAudit>,
    pub losses: Vec<f64>,
    pub warnings: Vec<PriorWarning>,
}

/// One discriminator with its optimizer.
#[derive(Debug, Clone, PartialEq)]
struct DiscTrainer {
    opt: AdamW,
    schedule: CyclicCosine,
    step: u64,
}

impl DiscTrainer {
    fn new(param_count: usize, cfg: &TrainConfig) -> Self {
        DiscTrainer {
            opt: AdamW::new(param_count, cfg.weight_decay),
            schedule: cfg.schedule(),
            step: 0,
        }
    }

    /// One BCE step on a balanced batch of real and fake feature columns.
    fn step(&mut self, disc: &mut dyn Discriminator, real: &DMatrix<f64>, fake: &DMatrix<f64>) -> Result<f64, NnetError> {
        let zr = disc.logits(real)?;
        let zf = disc.logits(fake)?;
        let loss = discriminator_loss(&zr, &zf);
        if !loss.is_finite() {
            return Err(NnetError::NonFiniteLoss {
                step: self.step,
                detail: format!("discriminator loss = {loss}"),
            });
        }
        // d softplus(−z)/dz = −σ(−z), d softplus(z)/dz = σ(z)
        let dr: Vec<f64> = zr.iter().map(|&z| -sigmoid(-z) / zr.len() as f64).collect();
        let df: Vec<f64> = zf.iter().map(|&z| sigmoid(z) / zf.len() as f64).collect();
        let (gr, _) = disc.backward(real, &dr)?;
        let (gf, _) = disc.backward(fake, &df)?;
        let grads: Vec<f64> = gr.iter().zip(&gf).map(|(a, b)| a + b).collect();
        let mut params = disc.params();
        self.opt.step(&mut params, &grads, self.schedule.lr(self.step));
        disc.set_params(&params)?;
        self.step += 1;
        Ok(loss)
    }
}

fn sequence_states(seqs: &[MotionSequence], joints: usize) -> Result<Vec<(FlowLayout, Vec<f64>)>, PriorError> {
    seqs.iter()
        .map(|s| {
            let x = encode(s, joints)?.x;
            Ok((FlowLayout::new(s.len(), joints, s.frame_rate), x))
        })
        .collect()
}

fn split_holdout<T: Clone>(items: &[T], holdout: f64) -> (Vec<T>, Vec<T>) {
    let n_hold = ((items.len() as f64) * holdout).round() as usize;
    let n_hold = n_hold.min(items.len().saturating_sub(1));
    let cut = items.len() - n_hold;
    (items[..cut].to_vec(), items[cut..].to_vec())
}

fn audit(disc: &dyn Discriminator, real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<PriorAudit, NnetError> {
    let w = disc.input_width();
    let zr = disc.logits(&columns(real, w))?;
    let zf = disc.logits(&columns(fake, w))?;
    let correct = zr.iter().filter(|&&z| z > 0.0).count() + zf.iter().filter(|&&z| z < 0.0).count();
    let sf: Vec<f64> = zf.iter().map(|&z| sigmoid(z)).collect();
    let mean = sf.iter().sum::<f64>() / sf.len().max(1) as f64;
    let variance = sf.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / sf.len().max(1) as f64;
    Ok(PriorAudit {
        accuracy: correct as f64 / (zr.len() + zf.len()).max(1) as f64,
        loss: discriminator_loss(&zr, &zf),
        fake_score_variance: variance,
    })
}

/// Trains one discriminator on feature items; returns per-epoch losses.
fn fit(
    disc: &mut dyn Discriminator,
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    cfg: &TrainConfig,
    stream: u64,
) -> Result<Vec<f64>, PriorError> {
    let w = disc.input_width();
    let mut trainer = DiscTrainer::new(disc.param_count(), cfg);
    let steps = real.len().max(fake.len()).div_ceil(cfg.batch_size);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream * 1_000_003 + epoch as u64 + 1);
        let mut r_order: Vec<usize> = (0..real.len()).collect();
        let mut f_order: Vec<usize> = (0..fake.len()).collect();
        r_order.shuffle(&mut rng);
        f_order.shuffle(&mut rng);
        let mut total = 0.0;
        for s in 0..steps {
            let pick = |order: &[usize], items: &[Vec<f64>]| -> DMatrix<f64> {
                let batch: Vec<Vec<f64>> = (0..cfg.batch_size)
                    .map(|k| items[order[(s * cfg.batch_size + k) % order.len()]].clone())
                    .collect();
                columns(&batch, w)
            };
            total += trainer.step(disc, &pick(&r_order, real), &pick(&f_order, fake))?;
        }
        losses.push(total / steps as f64);
    }
    Ok(losses)
}

/// Trains the enabled discriminators. Body items come from `body_real`
/// (every agent at every frame), interaction items from `interaction_real`
/// (every frame); both are contrasted with the items of `fake`.
pub fn train_priors(
    body_real: &[MotionSequence],
    interaction_real: &[MotionSequence],
    fake: &[MotionSequence],
    joints: usize,
    cfg: &PriorConfig,
) -> Result<PriorTraining, PriorError> {
    cfg.validate()?;
    if fake.is_empty() {
        return Err(PriorError::EmptyCorpus("generated samples"));
    }
    let fake_states = sequence_states(fake, joints)?;
    let (fake_train, fake_hold) = split_holdout(&fake_states, cfg.holdout);
    let mut out = PriorTraining {
        priors: Priors::default(),
        body: None,
        interaction: None,
        losses: Vec::new(),
        warnings: Vec::new(),
    };

    type Items = fn(&FlowLayout, &[f64]) -> Vec<Vec<f64>>;
    let body_fn: Items = |l, x| body_items(l, x);
    let int_fn: Items = |l, x| interaction_items(l, x);
    let gather = |states: &[(FlowLayout, Vec<f64>)], f: Items| -> Vec<Vec<f64>> {
        states.iter().flat_map(|(l, x)| f(l, x)).collect()
    };

    let jobs: [(bool, &[MotionSequence], &'static str, Items); 2] = [
        (cfg.use_body, body_real, "body", body_fn),
        (cfg.use_interaction, interaction_real, "interaction", int_fn),
    ];
    for (k, (enabled, real, name, items)) in jobs.into_iter().enumerate() {
        if !enabled {
            continue;
        }
        if real.is_empty() {
            return Err(PriorError::EmptyCorpus(if k == 0 { "body prior real set" } else { "interaction prior real set" }));
        }
        let real_states = sequence_states(real, joints)?;
        let (real_train, real_hold) = split_holdout(&real_states, cfg.holdout);
        let (rt, ft) = (gather(&real_train, items), gather(&fake_train, items));
        let (rh, fh) = (gather(&real_hold, items), gather(&fake_hold, items));
        let seed = cfg.train.seed.wrapping_add(k as u64 * 7919);
        let mut disc: Box<dyn Discriminator> = if k == 0 {
            Box::new(BodyPrior::new(joints, &cfg.body_hidden, seed))
        } else {
            Box::new(InteractionPrior::new(joints, &cfg.interaction_hidden, seed))
        };
        let losses = fit(disc.as_mut(), &rt, &ft, &cfg.train, k as u64)?;
        let audit = audit(disc.as_ref(), &rh, &fh)?;
        log::info!(
            "{name} prior: held-out accuracy {:.3}, loss {:.4}, fake score variance {:.2e}",
            audit.accuracy,
            audit.loss,
            audit.fake_score_variance
        );
        if audit.fake_score_variance < MODE_COLLAPSE_VARIANCE {
            log::warn!("{name} prior: generated scores collapsed (variance {:.2e})", audit.fake_score_variance);
            out.warnings.push(PriorWarning::ModeCollapse {
                prior: name.to_string(),
                variance: audit.fake_score_variance,
            });
        }
        out.losses.extend(losses);
        let params = disc.params();
        if k == 0 {
            let mut b = BodyPrior::new(joints, &cfg.body_hidden, seed);
            b.set_params(&params)?;
            out.priors.body = Some(b);
            out.body = Some(audit);
        } else {
            let mut i = InteractionPrior::new(joints, &cfg.interaction_hidden, seed);
            i.set_params(&params)?;
            out.priors.interaction = Some(i);
            out.interaction = Some(audit);
        }
    }
    Ok(out)
}

/// Priors that keep training against the generator: one discriminator step
/// per generator step, on that batch's data and one-step predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialPriors {
    pub priors: Priors,
    body_opt: Option<DiscTrainer>,
    interaction_opt: Option<DiscTrainer>,
    pub losses: Vec<f64>,
}

impl AdversarialPriors {
    pub fn new(priors: Priors, cfg: &TrainConfig) -> Result<Self, PriorError> {
        cfg.validate()?;
        Ok(AdversarialPriors {
            body_opt: priors.body.as_ref().map(|b| DiscTrainer::new(b.param_count(), cfg)),
            interaction_opt: priors.interaction.as_ref().map(|i| DiscTrainer::new(i.param_count(), cfg)),
            priors,
            losses: Vec::new(),
        })
    }
}

impl MotionPrior for AdversarialPriors {
    fn neg_log_score<'t>(&self, tape: &'t Tape, layout: &FlowLayout, x: &[Var<'t>]) -> Result<Var<'t>, NnetError> {
        self.priors.neg_log_score(tape, layout, x)
    }
}

impl AdversarialPrior for AdversarialPriors {
    fn discriminator_step(&mut self, layout: &FlowLayout, real: &[&[f64]], fake: &[&[f64]]) -> Result<f64, NnetError> {
        let mut total = 0.0;
        if let (Some(b), Some(opt)) = (&mut self.priors.body, &mut self.body_opt) {
            let w = b.input_width();
            let r: Vec<Vec<f64>> = real.iter().flat_map(|x| body_items(layout, x)).collect();
            let f: Vec<Vec<f64>> = fake.iter().flat_map(|x| body_items(layout, x)).collect();
            total += opt.step(b, &columns(&r, w), &columns(&f, w))?;
        }
        if let (Some(i), Some(opt)) = (&mut self.priors.interaction, &mut self.interaction_opt) {
            let w = i.input_width();
            let r: Vec<Vec<f64>> = real.iter().flat_map(|x| interaction_items(layout, x)).collect();
            let f: Vec<Vec<f64>> = fake.iter().flat_map(|x| interaction_items(layout, x)).collect();
            total += opt.step(i, &columns(&r, w), &columns(&f, w))?;
        }
        self.losses.push(total);
        Ok(total)
    }
}
