//! Learning paradigms, optimisation and episodic evaluation.
//!
//! * `full`: mini-batches of 2-hop neighbourhoods of training documents,
//!   every training label in the batch visible.
//! * `subgraphs`: batches of few-shot support subgraphs, only unmasked
//!   labels contribute.
//! * `maml_lh` / `maml_rh`: first-order MAML with a head shared across
//!   episodes or re-initialised for every episode.
//! * `protonet`: prototypical networks, no inner loop.
//! * `protomaml`: MAML whose head is initialised from the prototypes.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{FoldSplit, NodeId, SocialGraph};
use crate::metrics::{self, EpisodeMetrics};
use crate::model::{self, BoundModel, Linear, ModelConfig, ModelState, NodeBatch, TextBaseline, UserVotes};
use crate::rng;
use crate::sampler::{self, Episode, EpisodeRecord, QueryPlan, SamplerConfig, SubgraphView};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Full,
    Subgraphs,
    MamlLh,
    MamlRh,
    Protonet,
    Protomaml,
}

impl Paradigm {
    pub const ALL: [Paradigm; 6] = [
        Paradigm::Full,
        Paradigm::Subgraphs,
        Paradigm::MamlLh,
        Paradigm::MamlRh,
        Paradigm::Protonet,
        Paradigm::Protomaml,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Full => "full",
            Paradigm::Subgraphs => "subgraphs",
            Paradigm::MamlLh => "maml_lh",
            Paradigm::MamlRh => "maml_rh",
            Paradigm::Protonet => "protonet",
            Paradigm::Protomaml => "protomaml",
        }
    }

    /// Whether the trained state carries a classification head.
    pub fn has_head(self) -> bool {
        !matches!(self, Paradigm::Protonet | Paradigm::Protomaml)
    }

    /// Whether training runs an inner adaptation loop.
    pub fn meta_learns(self) -> bool {
        matches!(self, Paradigm::MamlLh | Paradigm::MamlRh | Paradigm::Protomaml)
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown paradigm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub outer_lr: f64,
    pub weight_decay: f64,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub max_steps: usize,
    /// Multiplicative learning-rate decay applied every 5% of `max_steps`.
    pub lr_decay: f64,
    /// Lowest learning rate as a fraction of `outer_lr`.
    pub lr_floor: f64,
    /// Early-stopping patience as a fraction of `max_steps`.
    pub patience: f64,
    /// Steps between validations; 0 means every 5% of `max_steps`.
    pub eval_every: usize,
    /// Episodes (or mini-batches) per outer step.
    pub episode_batch: usize,
    /// Seed documents per `full` mini-batch.
    pub batch_docs: usize,
    pub val_episodes: usize,
    /// Validation query documents per class.
    pub val_query_per_class: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::MamlLh,
            outer_lr: 1e-3,
            weight_decay: 1e-2,
            inner_lr: 1e-2,
            inner_steps: 5,
            max_steps: 200,
            lr_decay: 0.8,
            lr_floor: 0.01,
            patience: 0.1,
            eval_every: 0,
            episode_batch: 4,
            batch_docs: 64,
            val_episodes: 8,
            val_query_per_class: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.paradigm == Paradigm::Protonet && self.inner_steps > 0 {
            return fail("protonet has no inner loop; set inner_steps = 0".into());
        }
        if self.max_steps == 0 || self.episode_batch == 0 || self.batch_docs == 0 {
            return fail("max_steps, episode_batch and batch_docs must be positive".into());
        }
        for (name, v) in [
            ("outer_lr", self.outer_lr),
            ("inner_lr", self.inner_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || !(self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            return fail("lr_decay and lr_floor must lie in (0, 1]".into());
        }
        if !(self.patience > 0.0) {
            return fail("patience must be positive".into());
        }
        if self.val_episodes == 0 || self.val_query_per_class == 0 {
            return fail("val_episodes and val_query_per_class must be positive".into());
        }
        Ok(())
    }

    pub fn decay_every(&self) -> usize {
        (self.max_steps / 20).max(1)
    }

    pub fn eval_interval(&self) -> usize {
        if self.eval_every > 0 {
            self.eval_every
        } else {
            self.decay_every()
        }
    }

    pub fn patience_steps(&self) -> usize {
        ((self.patience * self.max_steps as f64).ceil() as usize).max(1)
    }
}

/// Step-wise decayed learning rate with a floor.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let drops = (step / cfg.decay_every()) as i32;
    (cfg.outer_lr * cfg.lr_decay.powi(drops)).max(cfg.outer_lr * cfg.lr_floor)
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Matrix<S>>,
    v: Vec<Matrix<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &[&Matrix<S>], weight_decay: f64) -> Self {
        let zeros = |p: &&Matrix<S>| Matrix::zeros(p.rows(), p.cols());
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// One update; parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, params: Vec<&mut Matrix<S>>, grads: &[Option<Matrix<S>>], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let c1 = S::one() - S::of(self.beta1.powi(self.t));
        let c2 = S::one() - S::of(self.beta2.powi(self.t));
        let (lr_s, eps, decay) = (S::of(lr), S::of(self.eps), S::of(1.0 - lr * self.weight_decay));
        for (i, p) in params.into_iter().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w = *w * decay - lr_s * update;
            }
        }
    }
}

/// Plain gradient descent on every parameter with a gradient.
pub fn sgd_step<S: Scalar>(params: Vec<&mut Matrix<S>>, grads: &[Option<Matrix<S>>], lr: f64) {
    let lr = S::of(lr);
    for (p, g) in params.into_iter().zip(grads) {
        if let Some(g) = g {
            for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                *w = *w - lr * gi;
            }
        }
    }
}

/// A subgraph ready for message passing, with labelled rows.
#[derive(Clone, Debug)]
pub struct Task<S> {
    pub batch: Arc<NodeBatch<S>>,
    /// `(local row, class)` pairs contributing to the loss.
    pub targets: Vec<(usize, usize)>,
}

impl<S: Scalar> Task<S> {
    /// Labelled rows are the view's flagged targets.
    pub fn from_view(g: &SocialGraph, view: &SubgraphView) -> Self {
        let targets = view
            .nodes
            .iter()
            .enumerate()
            .filter(|&(i, _)| view.targets[i])
            .filter_map(|(i, &v)| g.label(v).map(|y| (i, y)))
            .collect();
        Self {
            batch: Arc::new(NodeBatch::induced(g, &view.nodes)),
            targets,
        }
    }

    pub fn support(g: &SocialGraph, episode: &Episode) -> Self {
        Self {
            batch: Arc::new(NodeBatch::induced(g, &episode.support.nodes)),
            targets: episode.support_targets(),
        }
    }
}

/// Support and query of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeTasks<S> {
    pub index: u64,
    pub support: Task<S>,
    pub query: Task<S>,
}

impl<S: Scalar> EpisodeTasks<S> {
    pub fn new(g: &SocialGraph, episode: &Episode) -> Self {
        Self {
            index: episode.index,
            support: Task::support(g, episode),
            query: Task::from_view(g, &episode.query),
        }
    }
}

fn embed<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    state: &ModelState<S>,
    cfg: &ModelConfig,
    batch: &NodeBatch<S>,
    trainable: bool,
    training: bool,
    rng: &mut R,
) -> Result<(BoundModel, Var)> {
    let bound = state.bind(tape, trainable);
    let emb = model::encode(tape, batch, &bound, cfg, training, rng)?;
    Ok((bound, emb))
}

fn collect_grads<S: Scalar>(grads: &mut crate::autodiff::Gradients<S>, bound: &BoundModel) -> Vec<Option<Matrix<S>>> {
    bound.vars().into_iter().map(|v| grads.take(v)).collect()
}

/// Head cross-entropy over `task.targets` and its gradient for every parameter.
pub fn head_loss_grad<S: Scalar, R: Rng + ?Sized>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    task: &Task<S>,
    training: bool,
    rng: &mut R,
) -> Result<(f64, Vec<Option<Matrix<S>>>)> {
    if state.head.is_none() {
        return Err(Error::Structural("model has no head".into()));
    }
    let mut tape = Tape::new();
    let (bound, emb) = embed(&mut tape, state, cfg, &task.batch, true, training, rng)?;
    let logits = model::classify_head(&mut tape, emb, bound.head.as_ref().expect("bound head"))?;
    let loss = tape.cross_entropy(logits, &task.targets)?;
    let value = tape.value(loss).get(0, 0).to_f64_lossy();
    let mut grads = tape.backward(loss)?;
    Ok((value, collect_grads(&mut grads, &bound)))
}

/// Head cross-entropy without gradients.
pub fn head_loss<S: Scalar, R: Rng + ?Sized>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    task: &Task<S>,
    training: bool,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (bound, emb) = embed(&mut tape, state, cfg, &task.batch, false, training, rng)?;
    let head = bound.head.as_ref().ok_or_else(|| Error::Structural("model has no head".into()))?;
    let logits = model::classify_head(&mut tape, emb, head)?;
    let loss = tape.cross_entropy(logits, &task.targets)?;
    Ok(tape.value(loss).get(0, 0).to_f64_lossy())
}

/// Class probabilities for every row of `batch`.
pub fn head_probabilities<S: Scalar>(state: &ModelState<S>, cfg: &ModelConfig, batch: &NodeBatch<S>) -> Result<Matrix<S>> {
    let mut tape = Tape::new();
    let mut rng = rng::stream(0, 0);
    let (bound, emb) = embed(&mut tape, state, cfg, batch, false, false, &mut rng)?;
    let head = bound.head.as_ref().ok_or_else(|| Error::Structural("model has no head".into()))?;
    let logits = model::classify_head(&mut tape, emb, head)?;
    Ok(softmax_rows(tape.value(logits)))
}

/// Encoder output for every row of `batch`, without dropout.
pub fn embeddings<S: Scalar>(state: &ModelState<S>, cfg: &ModelConfig, batch: &NodeBatch<S>) -> Result<Matrix<S>> {
    let mut tape = Tape::new();
    let mut rng = rng::stream(0, 0);
    let (_, emb) = embed(&mut tape, state, cfg, batch, false, false, &mut rng)?;
    Ok(tape.value(emb).clone())
}

pub fn softmax_rows<S: Scalar>(logits: &Matrix<S>) -> Matrix<S> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z = z + *x;
        }
        for x in row.iter_mut() {
            *x = *x / z;
        }
    }
    out
}

/// Per-class mean of the embedding rows listed in `targets`.
pub fn prototypes<S: Scalar>(embeddings: &Matrix<S>, targets: &[(usize, usize)], classes: usize) -> Result<Matrix<S>> {
    let d = embeddings.cols();
    let mut sums = Matrix::zeros(classes, d);
    let mut counts = vec![0usize; classes];
    for &(row, y) in targets {
        if y >= classes || row >= embeddings.rows() {
            return Err(Error::Input(format!("prototype target ({row}, {y}) out of range")));
        }
        counts[y] += 1;
        for (s, &x) in sums.row_mut(y).iter_mut().zip(embeddings.row(row)) {
            *s = *s + x;
        }
    }
    if let Some(y) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Input(format!("no support examples of class {y}")));
    }
    for (y, &n) in counts.iter().enumerate() {
        let inv = S::one() / S::of(n as f64);
        sums.row_mut(y).iter_mut().for_each(|s| *s = *s * inv);
    }
    Ok(sums)
}

/// Softmax over negative squared distances to each prototype.
pub fn proto_classify<S: Scalar>(queries: &Matrix<S>, protos: &Matrix<S>) -> Matrix<S> {
    let logits = Matrix::from_fn(queries.rows(), protos.rows(), |i, y| {
        -queries
            .row(i)
            .iter()
            .zip(protos.row(y))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<S>()
    });
    softmax_rows(&logits)
}

/// Linear head with `W[:, y] = 2 c_y` and `b_y = -|c_y|^2`.
pub fn protomaml_head_init<S: Scalar>(protos: &Matrix<S>) -> Linear<S> {
    let (c, d) = protos.shape();
    let weight = Matrix::from_fn(d, c, |j, y| S::of(2.0) * protos.get(y, j));
    let bias = Matrix::from_fn(1, c, |_, y| -protos.row(y).iter().map(|&x| x * x).sum::<S>());
    Linear { weight, bias }
}

/// Prototype loss: support and query embedded on one tape, query rows
/// classified by negative squared distance to the support prototypes.
pub fn proto_loss_grad<S: Scalar, R: Rng + ?Sized>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    support: &Task<S>,
    query: &Task<S>,
    classes: usize,
    training: bool,
    rng: &mut R,
) -> Result<(f64, Vec<Option<Matrix<S>>>)> {
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape, true);
    let s_emb = model::encode(&mut tape, &support.batch, &bound, cfg, training, rng)?;
    let q_emb = model::encode(&mut tape, &query.batch, &bound, cfg, training, rng)?;
    let rows: Vec<usize> = support.targets.iter().map(|t| t.0).collect();
    let classes_of: Vec<usize> = support.targets.iter().map(|t| t.1).collect();
    let mut counts = vec![0usize; classes];
    for &y in &classes_of {
        counts[y] += 1;
    }
    if let Some(y) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Input(format!("no support examples of class {y}")));
    }
    let picked = tape.gather_rows(s_emb, &rows)?;
    let sums = tape.segment_sum(picked, &classes_of, classes)?;
    let inv = tape.constant(Matrix::from_fn(classes, 1, |y, _| S::one() / S::of(counts[y] as f64)));
    let protos = tape.mul(sums, inv)?;
    let dist = tape.squared_euclidean(q_emb, protos)?;
    let logits = tape.scale(dist, -S::one())?;
    let loss = tape.cross_entropy(logits, &query.targets)?;
    let value = tape.value(loss).get(0, 0).to_f64_lossy();
    let mut grads = tape.backward(loss)?;
    Ok((value, collect_grads(&mut grads, &bound)))
}

/// Support-loss telemetry of one adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    pub episode: u64,
    pub support_before: f64,
    pub support_after: f64,
    pub query_loss: Option<f64>,
    /// `(before - after) / before`, absent when `before` is 0.
    pub improvement: Option<f64>,
    /// Inner learning rate actually used (after any halving).
    pub inner_lr: f64,
}

impl AdaptationTrace {
    fn new(episode: u64, before: f64, after: f64, inner_lr: f64) -> Self {
        Self {
            episode,
            support_before: before,
            support_after: after,
            query_loss: None,
            improvement: (before > 0.0).then(|| (before - after) / before),
            inner_lr,
        }
    }
}

/// Inner-loop settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptProfile {
    pub inner_lr: f64,
    pub inner_steps: usize,
}

const MAX_HALVINGS: usize = 5;

/// `steps` plain gradient steps on the support head loss. Dropout follows
/// `training`; the trace losses are measured without dropout. A non-finite
/// value restarts adaptation at half the learning rate, at most 5 times.
pub fn inner_adapt<S: Scalar, R: Rng + ?Sized>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    support: &Task<S>,
    profile: AdaptProfile,
    training: bool,
    episode: u64,
    rng: &mut R,
) -> Result<(ModelState<S>, AdaptationTrace)> {
    let before = head_loss(state, cfg, support, false, rng)?;
    if profile.inner_steps == 0 || profile.inner_lr == 0.0 {
        return Ok((state.clone(), AdaptationTrace::new(episode, before, before, profile.inner_lr)));
    }
    let mut lr = profile.inner_lr;
    let mut last = None;
    for _ in 0..=MAX_HALVINGS {
        match adapt_once(state, cfg, support, lr, profile.inner_steps, training, rng) {
            Ok(adapted) => match head_loss(&adapted, cfg, support, false, rng) {
                Ok(after) => return Ok((adapted, AdaptationTrace::new(episode, before, after, lr))),
                Err(e @ Error::Numeric(_)) => last = Some(e),
                Err(e) => return Err(e),
            },
            Err(e @ Error::Numeric(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
        lr /= 2.0;
    }
    Err(last.unwrap_or_else(|| Error::Numeric("adaptation diverged".into())))
}

fn adapt_once<S: Scalar, R: Rng + ?Sized>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    support: &Task<S>,
    lr: f64,
    steps: usize,
    training: bool,
    rng: &mut R,
) -> Result<ModelState<S>> {
    let mut adapted = state.clone();
    for _ in 0..steps {
        let (_, grads) = head_loss_grad(&adapted, cfg, support, training, rng)?;
        sgd_step(adapted.params_mut(), &grads, lr);
    }
    if adapted.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("non-finite parameters after adaptation".into()));
    }
    Ok(adapted)
}

/// Fresh head drawn from the weight-initialisation distribution.
pub fn random_head<S: Scalar>(input: usize, classes: usize, seed: u64) -> Linear<S> {
    let mut rng = rng::stream(seed, rng::key(0x4ead, 0, 0));
    Linear::init(input, classes, &mut rng)
}

/// Starting point of an episode's inner loop.
fn episode_start<S: Scalar>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    paradigm: Paradigm,
    support: &Task<S>,
    classes: usize,
    head_seed: u64,
) -> Result<ModelState<S>> {
    let mut start = state.clone();
    match paradigm {
        Paradigm::Protomaml => {
            let emb = embeddings(state, cfg, &support.batch)?;
            let protos = prototypes(&emb, &support.targets, classes)?;
            start.head = Some(protomaml_head_init(&protos));
        }
        Paradigm::MamlRh => start.head = Some(random_head(state.embedding_dim(), classes, head_seed)),
        _ => {
            let fits = start.head.as_ref().is_some_and(|h| h.weight.cols() == classes);
            if !fits {
                start.head = Some(random_head(state.embedding_dim(), classes, head_seed));
            }
        }
    }
    Ok(start)
}

/// Outcome of one outer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: Option<f64>,
    pub skipped: usize,
    pub traces: Vec<AdaptationTrace>,
}

/// Gradient (in `state.params()` order) contributed by one episode.
#[allow(clippy::too_many_arguments)]
pub fn episode_gradient<S: Scalar>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    paradigm: Paradigm,
    tasks: &EpisodeTasks<S>,
    profile: AdaptProfile,
    classes: usize,
    seed: u64,
) -> Result<(f64, Vec<Option<Matrix<S>>>, Option<AdaptationTrace>)> {
    let mut rng = rng::stream(seed, rng::key(0x5e9, tasks.index, 0));
    match paradigm {
        Paradigm::Full | Paradigm::Subgraphs => {
            let (loss, grads) = head_loss_grad(state, cfg, &tasks.support, true, &mut rng)?;
            Ok((loss, grads, None))
        }
        Paradigm::Protonet => {
            let (loss, grads) = proto_loss_grad(state, cfg, &tasks.support, &tasks.query, classes, true, &mut rng)?;
            Ok((loss, grads, None))
        }
        Paradigm::MamlLh | Paradigm::MamlRh | Paradigm::Protomaml => {
            let start = episode_start(state, cfg, paradigm, &tasks.support, classes, rng::key(seed, tasks.index, 1))?;
            let (adapted, mut trace) = inner_adapt(&start, cfg, &tasks.support, profile, true, tasks.index, &mut rng)?;
            let (loss, mut grads) = head_loss_grad(&adapted, cfg, &tasks.query, true, &mut rng)?;
            trace.query_loss = Some(loss);
            let encoder = state.encoder_len();
            match paradigm {
                Paradigm::Protomaml => grads.truncate(encoder),
                Paradigm::MamlRh => grads[encoder..].iter_mut().for_each(|g| *g = None),
                _ => {}
            }
            Ok((loss, grads, Some(trace)))
        }
    }
}

/// Mean episode gradient followed by one AdamW update.
#[allow(clippy::too_many_arguments)]
pub fn outer_step<S: Scalar>(
    state: &mut ModelState<S>,
    opt: &mut AdamW<S>,
    cfg: &ModelConfig,
    paradigm: Paradigm,
    episodes: &[EpisodeTasks<S>],
    profile: AdaptProfile,
    classes: usize,
    lr: f64,
    seed: u64,
) -> Result<StepStats> {
    let frozen: &ModelState<S> = state;
    let results: Vec<Result<_>> = episodes
        .par_iter()
        .map(|t| episode_gradient(frozen, cfg, paradigm, t, profile, classes, seed))
        .collect();
    let mut stats = StepStats::default();
    let mut sum: Vec<Option<Matrix<S>>> = vec![None; state.params().len()];
    let mut loss_sum = 0.0;
    let mut used = 0usize;
    for r in results {
        match r {
            Ok((loss, grads, trace)) => {
                used += 1;
                loss_sum += loss;
                stats.traces.extend(trace);
                for (acc, g) in sum.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        match acc {
                            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x = *x + y),
                            None => *acc = Some(g),
                        }
                    }
                }
            }
            Err(Error::Numeric(msg)) => {
                log::warn!("skipping episode: {msg}");
                stats.skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Ok(stats);
    }
    let inv = S::one() / S::of(used as f64);
    for g in sum.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|x| *x = *x * inv);
    }
    opt.step(state.params_mut(), &sum, lr);
    stats.loss = Some(loss_sum / used as f64);
    Ok(stats)
}

/// One line of the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: Option<f64>,
    pub support_before: Option<f64>,
    pub support_after: Option<f64>,
    pub query_loss: Option<f64>,
    pub improvement: Option<f64>,
    pub skipped: usize,
    pub val_loss: Option<f64>,
    pub best: bool,
    pub checkpoint: Option<String>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl StepLog {
    fn from_stats(step: usize, lr: f64, stats: &StepStats) -> Self {
        let t = &stats.traces;
        Self {
            step,
            lr,
            loss: stats.loss,
            support_before: mean_of(t.iter().map(|x| x.support_before)),
            support_after: mean_of(t.iter().map(|x| x.support_after)),
            query_loss: mean_of(t.iter().filter_map(|x| x.query_loss)),
            improvement: mean_of(t.iter().filter_map(|x| x.improvement)),
            skipped: stats.skipped,
            ..Default::default()
        }
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct Trained<S> {
    pub state: ModelState<S>,
    pub best_step: Option<usize>,
    pub best_val: Option<f64>,
    pub steps_run: usize,
    pub traces: Vec<AdaptationTrace>,
}

/// Episode source for training that draws views in unmasking windows.
struct EpisodeFeed<'a> {
    g: &'a SocialGraph,
    pool: Vec<NodeId>,
    plan: QueryPlan,
    cfg: SamplerConfig,
    next: u64,
    buffer: std::collections::VecDeque<Episode>,
}

impl<'a> EpisodeFeed<'a> {
    fn take(&mut self, n: usize) -> Result<Vec<Episode>> {
        while self.buffer.len() < n {
            let chunk = sampler::episode_stream(self.g, &self.pool, &self.plan, &self.cfg, self.next, self.cfg.window)?;
            self.next += self.cfg.window as u64;
            self.buffer.extend(chunk);
        }
        Ok(self.buffer.drain(..n).collect())
    }
}

/// Validation set for early stopping.
enum Validation<S> {
    /// Head loss on a fixed labelled view.
    Direct(Task<S>),
    /// Mean query loss after adaptation over fixed episodes.
    Episodes(Vec<EpisodeTasks<S>>),
}

fn balanced_subset<R: Rng + ?Sized>(g: &SocialGraph, docs: &[NodeId], per_class: usize, rng: &mut R) -> Vec<NodeId> {
    let mut by_class: Vec<Vec<NodeId>> = vec![Vec::new(); g.num_classes()];
    for &d in docs {
        if let Some(y) = g.label(d) {
            by_class[y].push(d);
        }
    }
    let mut out = Vec::new();
    for mut docs in by_class {
        docs.shuffle(rng);
        out.extend(docs.into_iter().take(per_class));
    }
    out.sort_unstable();
    out
}

/// Mean query loss over validation episodes, adapting as `paradigm` does.
#[allow(clippy::too_many_arguments)]
fn episodic_loss<S: Scalar>(
    state: &ModelState<S>,
    cfg: &ModelConfig,
    paradigm: Paradigm,
    episodes: &[EpisodeTasks<S>],
    profile: AdaptProfile,
    classes: usize,
    seed: u64,
) -> Result<f64> {
    let losses: Vec<Result<f64>> = episodes
        .par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, rng::key(0x7a1, t.index, 0));
            if paradigm == Paradigm::Protonet {
                let s = embeddings(state, cfg, &t.support.batch)?;
                let q = embeddings(state, cfg, &t.query.batch)?;
                let protos = prototypes(&s, &t.support.targets, classes)?;
                let probs = proto_classify(&q, &protos);
                return Ok(mean_nll(&probs, &t.query.targets));
            }
            let start = episode_start(state, cfg, paradigm, &t.support, classes, rng::key(seed, t.index, 1))?;
            let adapted = if paradigm.meta_learns() {
                inner_adapt(&start, cfg, &t.support, profile, false, t.index, &mut rng)?.0
            } else {
                start
            };
            head_loss(&adapted, cfg, &t.query, false, &mut rng)
        })
        .collect();
    let mut sum = 0.0;
    let mut n = 0;
    for l in losses {
        match l {
            Ok(v) => {
                sum += v;
                n += 1;
            }
            Err(Error::Numeric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::Numeric("every validation episode diverged".into()));
    }
    Ok(sum / n as f64)
}

fn mean_nll<S: Scalar>(probs: &Matrix<S>, targets: &[(usize, usize)]) -> f64 {
    let total: f64 = targets
        .iter()
        .map(|&(r, c)| -probs.get(r, c).to_f64_lossy().max(1e-300).ln())
        .sum();
    total / targets.len().max(1) as f64
}

/// Trains `paradigm` on one fold: outer steps over training episodes (or
/// mini-batches for `full`), step-wise learning-rate decay, and early
/// stopping on validation loss with the best state retained.
pub fn train<S: Scalar>(
    g: &SocialGraph,
    fold: &FoldSplit,
    mcfg: &ModelConfig,
    scfg: &SamplerConfig,
    tcfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<Trained<S>> {
    tcfg.validate()?;
    mcfg.validate()?;
    scfg.validate(g.num_classes())?;
    if mcfg.input_dim != g.feature_dim() {
        return Err(Error::Config(format!(
            "model input_dim {} does not match feature width {}",
            mcfg.input_dim,
            g.feature_dim()
        )));
    }
    let classes = g.num_classes();
    let paradigm = tcfg.paradigm;
    let seed = rng::key(tcfg.seed, fold.fold_id as u64, 0x7a);
    let mut mcfg = mcfg.clone();
    mcfg.num_classes = classes;
    let mut state: ModelState<S> = ModelState::init(&mcfg, paradigm.has_head(), seed);
    let mut opt = AdamW::new(&state.params(), tcfg.weight_decay);
    let profile = AdaptProfile {
        inner_lr: tcfg.inner_lr,
        inner_steps: tcfg.inner_steps,
    };

    let train_docs = fold.train_docs.clone();
    let mut train_mask = vec![false; g.num_nodes()];
    for &d in &train_docs {
        train_mask[d.index()] = true;
    }
    let mut vrng = rng::stream(seed, rng::key(0x7a1, 0, 1));
    let val_docs = balanced_subset(g, &fold.val_docs, tcfg.val_query_per_class, &mut vrng);
    let validation = match paradigm {
        Paradigm::Full | Paradigm::Subgraphs => {
            Validation::Direct(Task::from_view(g, &sampler::query_view(g, &val_docs, 2)?))
        }
        _ => {
            let vcfg = SamplerConfig {
                seed: rng::key(seed, 0x7a1, 2),
                ..scfg.clone()
            };
            let plan = QueryPlan::Shared(Arc::new(sampler::query_view(g, &val_docs, 2)?));
            let eps = sampler::episode_stream(g, &train_docs, &plan, &vcfg, 0, tcfg.val_episodes)?;
            Validation::Episodes(eps.iter().map(|e| EpisodeTasks::new(g, e)).collect())
        }
    };

    let mut feed = EpisodeFeed {
        g,
        pool: train_docs.clone(),
        plan: QueryPlan::Balanced {
            pool: train_docs.clone(),
            per_class: scfg.query_per_class,
        },
        cfg: SamplerConfig {
            seed: rng::key(seed, 0xfeed, 0),
            ..scfg.clone()
        },
        next: 0,
        buffer: Default::default(),
    };

    let mut best: Option<(f64, usize, ModelState<S>)> = None;
    let mut since_best = 0;
    let mut traces = Vec::new();
    let mut steps_run = 0;
    for step in 0..tcfg.max_steps {
        let lr = lr_at(tcfg, step);
        let tasks: Vec<EpisodeTasks<S>> = if paradigm == Paradigm::Full {
            (0..tcfg.episode_batch)
                .map(|b| {
                    let mut rng = rng::stream(seed, rng::key(0xf011, step as u64, b as u64));
                    let seeds: Vec<NodeId> = train_docs
                        .choose_multiple(&mut rng, tcfg.batch_docs.min(train_docs.len()))
                        .copied()
                        .collect();
                    let mut view = sampler::query_view(g, &seeds, 2)?;
                    for (i, v) in view.nodes.iter().enumerate() {
                        view.targets[i] = train_mask[v.index()];
                    }
                    let task = Task::from_view(g, &view);
                    Ok(EpisodeTasks {
                        index: (step * tcfg.episode_batch + b) as u64,
                        query: task.clone(),
                        support: task,
                    })
                })
                .collect::<Result<_>>()?
        } else {
            feed.take(tcfg.episode_batch)?
                .iter()
                .map(|e| EpisodeTasks::new(g, e))
                .collect()
        };
        let stats = outer_step(&mut state, &mut opt, &mcfg, paradigm, &tasks, profile, classes, lr, seed)?;
        steps_run = step + 1;
        let mut record = StepLog::from_stats(step, lr, &stats);
        traces.extend(stats.traces);

        let last = step + 1 == tcfg.max_steps;
        if (step + 1) % tcfg.eval_interval() == 0 || last {
            let val = match &validation {
                Validation::Direct(task) => {
                    let mut rng = rng::stream(seed, 0);
                    head_loss(&state, &mcfg, task, false, &mut rng)?
                }
                Validation::Episodes(eps) => episodic_loss(&state, &mcfg, paradigm, eps, profile, classes, seed)?,
            };
            record.val_loss = Some(val);
            if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
                best = Some((val, step, state.clone()));
                record.best = true;
                since_best = 0;
            } else {
                since_best += tcfg.eval_interval();
            }
        }
        on_step(&record);
        if since_best >= tcfg.patience_steps() {
            break;
        }
    }
    let (best_val, best_step, state) = match best {
        Some((v, s, st)) => (Some(v), Some(s), st),
        None => (None, None, state),
    };
    Ok(Trained {
        state,
        best_step,
        best_val,
        steps_run,
        traces,
    })
}

/// Trains the graph-free text baseline on the fold's training documents.
pub fn train_text<S: Scalar>(
    g: &SocialGraph,
    fold: &FoldSplit,
    hidden: usize,
    dropout: f64,
    tcfg: &TrainConfig,
) -> Result<TextBaseline<S>> {
    tcfg.validate()?;
    let seed = rng::key(tcfg.seed, fold.fold_id as u64, 0x7e);
    let mut model: TextBaseline<S> = TextBaseline::init(g.feature_dim(), hidden, g.num_classes(), seed);
    let mut opt = AdamW::new(&model.params(), tcfg.weight_decay);
    let rows = |docs: &[NodeId]| -> (Matrix<S>, Vec<(usize, usize)>) {
        let d = g.feature_dim();
        let m = Matrix::from_fn(docs.len(), d, |i, j| S::of(g.features(docs[i]).expect("document")[j]));
        let t = docs.iter().enumerate().map(|(i, &v)| (i, g.label(v).expect("document"))).collect();
        (m, t)
    };
    let (val_x, val_t) = rows(&fold.val_docs);
    let mut best: Option<(f64, TextBaseline<S>)> = None;
    let mut since_best = 0;
    for step in 0..tcfg.max_steps {
        let mut rng = rng::stream(seed, rng::key(0x7e47, step as u64, 0));
        let batch: Vec<NodeId> = fold
            .train_docs
            .choose_multiple(&mut rng, tcfg.batch_docs.min(fold.train_docs.len()))
            .copied()
            .collect();
        let (x, t) = rows(&batch);
        let mut tape = Tape::new();
        let (logits, vars) = model.logits(&mut tape, x, dropout, true, &mut rng)?;
        let loss = tape.cross_entropy(logits, &t)?;
        let mut grads = tape.backward(loss)?;
        let grads: Vec<_> = vars.into_iter().map(|v| grads.take(v)).collect();
        opt.step(model.params_mut(), &grads, lr_at(tcfg, step));
        if (step + 1) % tcfg.eval_interval() == 0 || step + 1 == tcfg.max_steps {
            let mut tape = Tape::new();
            let (logits, _) = model.logits(&mut tape, val_x.clone(), dropout, false, &mut rng)?;
            let loss = tape.cross_entropy(logits, &val_t)?;
            let val = tape.value(loss).get(0, 0).to_f64_lossy();
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                best = Some((val, model.clone()));
                since_best = 0;
            } else {
                since_best += tcfg.eval_interval();
            }
        }
        if since_best >= tcfg.patience_steps() {
            break;
        }
    }
    Ok(best.map_or(model, |(_, m)| m))
}

/// Class probabilities of the text baseline for `docs`.
pub fn text_probabilities<S: Scalar>(g: &SocialGraph, model: &TextBaseline<S>, docs: &[NodeId]) -> Result<Vec<Vec<f64>>> {
    let d = g.feature_dim();
    let x = Matrix::from_fn(docs.len(), d, |i, j| S::of(g.features(docs[i]).expect("document")[j]));
    let mut tape = Tape::new();
    let mut rng = rng::stream(0, 0);
    let (logits, _) = model.logits(&mut tape, x, 0.0, false, &mut rng)?;
    let p = softmax_rows(tape.value(logits));
    Ok((0..p.rows()).map(|i| p.row(i).iter().map(|x| x.to_f64_lossy()).collect()).collect())
}

/// Evaluation settings shared by every model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_shot: usize,
    pub episodes: usize,
    pub profile: AdaptProfile,
    /// Score the trained model as is, without support labels.
    pub zero_shot: bool,
    pub seed: u64,
}

/// What is being evaluated.
pub enum Evaluated<'a, S> {
    Model {
        state: &'a ModelState<S>,
        config: &'a ModelConfig,
        paradigm: Paradigm,
    },
    /// Fixed per-document probabilities (text baseline), indexed by
    /// position in the evaluation pool.
    Fixed(Vec<Vec<f64>>),
    /// Hard user-vote predictions with class 1 vote share, indexed by
    /// document row of the graph.
    Votes(&'a UserVotes),
}

/// Per-episode results of one evaluation run.
#[derive(Clone, Debug)]
pub struct EvalRun {
    pub metrics: Vec<EpisodeMetrics>,
    pub traces: Vec<AdaptationTrace>,
    pub manifest: Vec<EpisodeRecord>,
    pub skipped: usize,
}

/// Episodic evaluation over `pool`: each episode samples a `k_shot`
/// support subgraph from the pool and scores the pool documents of the
/// shared query graph that lie outside the support subgraph.
pub fn evaluate<S: Scalar>(
    g: &SocialGraph,
    pool: &[NodeId],
    what: &Evaluated<'_, S>,
    scfg: &SamplerConfig,
    ecfg: &EvalConfig,
) -> Result<EvalRun> {
    let classes = g.num_classes();
    let query_view = Arc::new(sampler::query_view(g, pool, 2)?);
    let scfg = SamplerConfig {
        k_shot: ecfg.k_shot,
        seed: ecfg.seed,
        ..scfg.clone()
    };
    let episodes = sampler::episode_stream(g, pool, &QueryPlan::Shared(Arc::clone(&query_view)), &scfg, 0, ecfg.episodes)?;
    let truth_of = |i: usize| g.label(query_view.nodes[i]).expect("query targets are documents");

    // per-query-row probabilities shared by episodes when nothing adapts
    let mut fixed: Option<Matrix<S>> = None;
    let mut query_batch: Option<NodeBatch<S>> = None;
    let mut query_emb: Option<Matrix<S>> = None;
    match what {
        Evaluated::Model { state, config, paradigm } => {
            let batch = NodeBatch::induced(g, &query_view.nodes);
            let head_fits = state.head.as_ref().is_some_and(|h| h.weight.cols() == classes);
            if ecfg.zero_shot {
                if !paradigm.has_head() {
                    return Err(Error::Config(format!("{paradigm} cannot be evaluated without support labels")));
                }
                let mut s = (*state).clone();
                if !head_fits {
                    s.head = Some(random_head(s.embedding_dim(), classes, rng::key(ecfg.seed, 0x4ead, 0)));
                }
                fixed = Some(head_probabilities(&s, config, &batch)?);
            } else if *paradigm == Paradigm::Protonet {
                query_emb = Some(embeddings(state, config, &batch)?);
            }
            query_batch = Some(batch);
        }
        Evaluated::Fixed(probs) => {
            if probs.len() != pool.len() {
                return Err(Error::Input("fixed probabilities must cover the pool".into()));
            }
            let mut m = Matrix::zeros(query_view.len(), classes);
            for (&d, p) in pool.iter().zip(probs) {
                let i = query_view.local(d).expect("pool docs are in the query view");
                for (c, &v) in p.iter().enumerate() {
                    m.set(i, c, S::of(v));
                }
            }
            fixed = Some(m);
        }
        Evaluated::Votes(_) => {}
    }

    let results: Vec<Result<(EpisodeMetrics, Option<AdaptationTrace>)>> = episodes
        .par_iter()
        .map(|ep| {
            let scored = ep.scored_query();
            let truth: Vec<usize> = scored.iter().map(|&i| truth_of(i)).collect();
            if let Evaluated::Votes(votes) = what {
                let rows: Vec<usize> = scored
                    .iter()
                    .map(|&i| g.doc_row(query_view.nodes[i]).expect("document"))
                    .collect();
                let predicted: Vec<usize> = rows.iter().map(|&r| votes.predicted[r]).collect();
                let share: Vec<f64> = rows.iter().map(|&r| votes.positive_share[r]).collect();
                return Ok((metrics::score_predictions(ep.index, classes, &truth, &predicted, Some(&share))?, None));
            }
            let mut trace = None;
            let probs: Matrix<S> = if let Some(p) = &fixed {
                p.clone()
            } else {
                let Evaluated::Model { state, config, paradigm } = what else { unreachable!() };
                let support = Task::<S>::support(g, ep);
                let batch = query_batch.as_ref().expect("model evaluation");
                if *paradigm == Paradigm::Protonet {
                    let s = embeddings(state, config, &support.batch)?;
                    let protos = prototypes(&s, &support.targets, classes)?;
                    proto_classify(query_emb.as_ref().expect("protonet"), &protos)
                } else {
                    let mut rng = rng::stream(ecfg.seed, rng::key(0xe7a1, ep.index, 0));
                    let start = episode_start(
                        state,
                        config,
                        *paradigm,
                        &support,
                        classes,
                        rng::key(ecfg.seed, ep.index, 1),
                    )?;
                    let (adapted, t) = inner_adapt(&start, config, &support, ecfg.profile, false, ep.index, &mut rng)?;
                    trace = Some(t);
                    head_probabilities(&adapted, config, batch)?
                }
            };
            let rows: Vec<Vec<f64>> = scored
                .iter()
                .map(|&i| probs.row(i).iter().map(|x| x.to_f64_lossy()).collect())
                .collect();
            Ok((metrics::score_episode(ep.index, classes, &truth, &rows)?, trace))
        })
        .collect();

    let mut run = EvalRun {
        metrics: Vec::new(),
        traces: Vec::new(),
        manifest: episodes.iter().map(Episode::record).collect(),
        skipped: 0,
    };
    for r in results {
        match r {
            Ok((m, t)) => {
                run.metrics.push(m);
                run.traces.extend(t);
            }
            Err(Error::Numeric(msg)) => {
                log::warn!("skipping evaluation episode: {msg}");
                run.skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if run.metrics.is_empty() {
        return Err(Error::Numeric("every evaluation episode diverged".into()));
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_steps_and_floors() {
        let cfg = TrainConfig {
            max_steps: 100,
            outer_lr: 1.0,
            lr_decay: 0.5,
            ..Default::default()
        };
        assert_eq!(lr_at(&cfg, 0), 1.0);
        assert_eq!(lr_at(&cfg, 4), 1.0);
        assert_eq!(lr_at(&cfg, 5), 0.5);
        assert_eq!(lr_at(&cfg, 99), 0.01);
    }

    #[test]
    fn protonet_rejects_inner_steps() {
        let cfg = TrainConfig {
            paradigm: Paradigm::Protonet,
            inner_steps: 3,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn paradigm_names_round_trip() {
        for p in Paradigm::ALL {
            assert_eq!(p.name().parse::<Paradigm>().unwrap(), p);
        }
    }

    #[test]
    fn head_init_hand_case() {
        let c = Matrix::from_vec(1, 2, vec![1.0f64, 2.0]).unwrap();
        let h = protomaml_head_init(&c);
        assert_eq!(h.weight.data(), &[2.0, 4.0]);
        assert_eq!(h.bias.data(), &[-5.0]);
    }

    #[test]
    fn proto_probabilities_hand_case() {
        let q = Matrix::from_vec(1, 1, vec![0.0f64]).unwrap();
        let p = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let probs = proto_classify(&q, &p);
        let e = (-1.0f64).exp() / ((-1.0f64).exp() + (-4.0f64).exp());
        assert!((probs.get(0, 0) - e).abs() < 1e-12);
        assert!((probs.get(0, 0) - 0.9526).abs() < 1e-4);
    }
}
