//! Episode loss, reverse-mode gradients, the SGD step, the episodic training
//! loop and the finite-difference gradient check.
//!
//! For class `c` the loss term is
//!
//! ```text
//! lambda R_c^2
//!   + (1/alpha) log(1 + sum_{x+} exp( alpha (d(x+) - R_c)))
//!   + (1/beta)  log(1 + sum_{x-} exp(-beta (d(x-) - R_c - M_c)))
//! ```
//!
//! averaged over the N classes of the episode. Positives are the support and
//! known queries of class `c`; negatives are every other instance of the
//! episode plus any pseudo-negatives. `R_c` and `M_c` are interpolated
//! quantiles on the tape, so gradients reach the encoder through them and
//! reach `tau1`/`tau2` through the interpolation weight.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boundary::{
    pns_candidates, pns_count, pns_probabilities, select_pns, BandPolicy, Boundary, ClassPrototype,
    QuantileLevels, ViewPoint,
};
use crate::data::{sample_episode, Episode, Instance, InstancePool, NUM_VIEWS};
use crate::encoder::Pooling;
use crate::error::{GpamError, Result};
use crate::exec::Execution;
use crate::matrix::Matrix;
use crate::metric::{distance_graph, DistanceForm, WeightMode};
use crate::model::{
    bind, class_graph, class_values, collect_grads, view_matrix, Block, BoundModel, ClassNodes,
    MarginMode, ModelOptions, ModelParams, ParamGrads,
};
use crate::tape::{self, Tape, Var};

/// Mechanisms that can be switched off one at a time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Unit variances in every view distance.
    pub euclidean_distance: bool,
    /// Constant margin instead of the quantile margin.
    pub fixed_margin: Option<f64>,
    /// Margin fixed at zero.
    pub no_margin: bool,
    pub no_pns: bool,
    pub equal_weights: bool,
    pub no_self_attention: bool,
    /// All view weight on the main view.
    pub single_view: bool,
    /// One prompt shared by all views.
    pub shared_prompt: bool,
    /// Pool over prompt and support rows instead of prompt rows only.
    pub pool_all: bool,
}

/// Named single-mechanism variants used by the ablation runner and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    EuclideanDistance,
    FixedMargin(f64),
    NoMargin,
    NoPns,
    EqualWeights,
    NoSelfAttention,
    SingleView,
    SharedPrompt,
    PoolAll,
}

impl Variant {
    pub fn apply(self, a: &mut Ablations) {
        match self {
            Variant::Full => {}
            Variant::EuclideanDistance => a.euclidean_distance = true,
            Variant::FixedMargin(m) => a.fixed_margin = Some(m),
            Variant::NoMargin => a.no_margin = true,
            Variant::NoPns => a.no_pns = true,
            Variant::EqualWeights => a.equal_weights = true,
            Variant::NoSelfAttention => a.no_self_attention = true,
            Variant::SingleView => a.single_view = true,
            Variant::SharedPrompt => a.shared_prompt = true,
            Variant::PoolAll => a.pool_all = true,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::EuclideanDistance => f.write_str("euclidean-distance"),
            Variant::FixedMargin(m) => write!(f, "fixed-margin={m}"),
            Variant::NoMargin => f.write_str("no-margin"),
            Variant::NoPns => f.write_str("no-pns"),
            Variant::EqualWeights => f.write_str("equal-weights"),
            Variant::NoSelfAttention => f.write_str("no-self-attention"),
            Variant::SingleView => f.write_str("single-view"),
            Variant::SharedPrompt => f.write_str("shared-prompt"),
            Variant::PoolAll => f.write_str("pool-all"),
        }
    }
}

impl FromStr for Variant {
    type Err = GpamError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "euclidean-distance" => Variant::EuclideanDistance,
            "no-margin" => Variant::NoMargin,
            "no-pns" => Variant::NoPns,
            "equal-weights" => Variant::EqualWeights,
            "no-self-attention" => Variant::NoSelfAttention,
            "single-view" => Variant::SingleView,
            "shared-prompt" => Variant::SharedPrompt,
            "pool-all" => Variant::PoolAll,
            other => match other.strip_prefix("fixed-margin=") {
                Some(m) => {
                    let m: f64 = m
                        .parse()
                        .map_err(|_| GpamError::Config(format!("bad fixed margin in {other:?}")))?;
                    if !(m >= 0.0 && m.is_finite()) {
                        return Err(GpamError::Config(format!(
                            "fixed margin must be >= 0, got {m}"
                        )));
                    }
                    Variant::FixedMargin(m)
                }
                None => return Err(GpamError::Config(format!("unknown variant {other:?}"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub episodes: usize,
    /// Episodes whose gradients are averaged per optimizer step.
    pub batch: usize,
    pub ways: usize,
    pub shots: usize,
    pub q_known: usize,
    pub nota_rate: f64,
    pub pns_ratio: f64,
    /// Noise standard deviation in units of `sqrt(mean R_c)`.
    pub pns_noise_scale: f64,
    /// Candidate pool size as a multiple of the selected count.
    pub pns_pool_factor: usize,
    pub prompt_len: usize,
    pub heads: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub learn_quantiles: bool,
    /// Differentiate the loss through `M_c`. When false the margin enters
    /// the loss as a constant.
    pub margin_gradient: bool,
    pub early_stop: bool,
    pub distance: DistanceForm,
    pub band: BandPolicy,
    pub ablations: Ablations,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.001,
            alpha: 1.0,
            beta: 3.0,
            lr: 2e-4,
            weight_decay: 1e-4,
            episodes: 2000,
            batch: 1,
            ways: 5,
            shots: 1,
            q_known: 10,
            nota_rate: 0.5,
            pns_ratio: 0.2,
            pns_noise_scale: 1.0,
            pns_pool_factor: 10,
            prompt_len: 8,
            heads: 2,
            tau1: 0.1,
            tau2: 0.2,
            learn_quantiles: true,
            margin_gradient: true,
            early_stop: true,
            distance: DistanceForm::Variance,
            band: BandPolicy::Reject,
            ablations: Ablations::default(),
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GpamError::Config(msg));
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return bad(format!(
                "alpha and beta must be > 0, got {} and {}",
                self.alpha, self.beta
            ));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be finite and >= 0".into());
        }
        if self.batch == 0 || self.ways == 0 || self.shots == 0 {
            return bad("batch, ways and shots must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.nota_rate) {
            return bad(format!("nota_rate {} outside [0, 1)", self.nota_rate));
        }
        if !(self.pns_ratio >= 0.0) || !(self.pns_noise_scale > 0.0) || self.pns_pool_factor == 0 {
            return bad("pns ratio must be >= 0, noise scale > 0, pool factor >= 1".into());
        }
        if let Some(m) = self.ablations.fixed_margin {
            if !(m >= 0.0 && m.is_finite()) {
                return bad(format!("fixed margin must be >= 0, got {m}"));
            }
        }
        self.levels().validate()
    }

    pub fn levels(&self) -> QuantileLevels {
        QuantileLevels {
            tau1: self.tau1,
            tau2: self.tau2,
        }
    }

    pub fn options(&self) -> ModelOptions {
        let a = &self.ablations;
        ModelOptions {
            form: if a.euclidean_distance {
                DistanceForm::Euclidean
            } else {
                self.distance
            },
            weights: if a.single_view {
                WeightMode::MainOnly
            } else if a.equal_weights {
                WeightMode::Equal
            } else if a.no_self_attention {
                WeightMode::NoSelfAttention
            } else {
                WeightMode::Adaptive
            },
            margin: if a.no_margin {
                MarginMode::Fixed(0.0)
            } else if let Some(m) = a.fixed_margin {
                MarginMode::Fixed(m)
            } else {
                MarginMode::Adaptive
            },
            band: self.band,
            shared_prompt: a.shared_prompt,
        }
    }

    pub fn pns_enabled(&self) -> bool {
        !self.ablations.no_pns && self.pns_ratio > 0.0
    }

    pub fn with_variant(&self, v: Variant) -> Self {
        let mut c = self.clone();
        v.apply(&mut c.ablations);
        c
    }

    /// Fresh parameters for this configuration, seeded from `seed`.
    pub fn init_params(&self, dim: usize) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut p = ModelParams::init(dim, self.prompt_len, self.heads, self.levels(), &mut rng)?;
        if self.ablations.pool_all {
            p.encoder.pooling = Pooling::All;
        }
        Ok(p)
    }
}

/// Random stream for the `index`-th job under `seed`. Streams are disjoint,
/// so jobs can run in any order.
pub fn job_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Where pseudo-negatives come from when building an episode loss.
pub enum PnsSource<'a> {
    Off,
    /// Use exactly these points.
    Fixed(&'a [ViewPoint]),
    /// Generate from the current prototypes.
    Sample(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDiagnostics {
    pub relation: String,
    pub range: f64,
    pub margin: f64,
    pub range_term: f64,
    pub positive_term: f64,
    pub negative_term: f64,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLoss {
    pub loss: f64,
    pub classes: Vec<ClassDiagnostics>,
    /// Pseudo-negatives that entered the loss.
    pub pns: Vec<ViewPoint>,
    /// Why pseudo-negative sampling was skipped, if it was.
    pub pns_skipped: Option<String>,
}

impl EpisodeLoss {
    pub fn mean_range(&self) -> f64 {
        self.classes.iter().map(|c| c.range).sum::<f64>() / self.classes.len() as f64
    }

    pub fn mean_margin(&self) -> f64 {
        self.classes.iter().map(|c| c.margin).sum::<f64>() / self.classes.len() as f64
    }
}

/// The three terms of one class, evaluated directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassTerms {
    pub range_term: f64,
    pub positive_term: f64,
    pub negative_term: f64,
}

impl ClassTerms {
    pub fn total(&self) -> f64 {
        self.range_term + self.positive_term + self.negative_term
    }
}

/// Direct evaluation of one class's loss terms from distances.
pub fn class_terms(
    positives: &[f64],
    negatives: &[f64],
    range: f64,
    margin: f64,
    lambda: f64,
    alpha: f64,
    beta: f64,
) -> ClassTerms {
    let pos: Vec<f64> = positives.iter().map(|d| alpha * (d - range)).collect();
    let neg: Vec<f64> = negatives
        .iter()
        .map(|d| -beta * (d - range - margin))
        .collect();
    ClassTerms {
        range_term: lambda * range * range,
        positive_term: tape::log1p_sum_exp(&pos) / alpha,
        negative_term: tape::log1p_sum_exp(&neg) / beta,
    }
}

struct EpisodeGraph {
    tape: Tape,
    bound: BoundModel,
    loss: Var,
    report: EpisodeLoss,
}

fn view_constants<'a>(
    tape: &mut Tape,
    rows: impl Iterator<Item = &'a Instance> + Clone,
    dim: usize,
) -> [Var; NUM_VIEWS] {
    std::array::from_fn(|j| tape.constant(view_matrix(rows.clone(), j, dim)))
}

fn point_constants(tape: &mut Tape, points: &[ViewPoint], dim: usize) -> [Var; NUM_VIEWS] {
    std::array::from_fn(|j| {
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            data.extend_from_slice(&p[j]);
        }
        tape.constant(Matrix::from_vec(points.len(), dim, data))
    })
}

fn margin_node(
    tape: &mut Tape,
    negatives: Option<Var>,
    range: Var,
    tau2: Var,
    mode: MarginMode,
) -> Var {
    match (mode, negatives) {
        (MarginMode::Fixed(m), _) => tape.constant(Matrix::scalar(m)),
        (MarginMode::Adaptive, None) => tape.constant(Matrix::scalar(0.0)),
        (MarginMode::Adaptive, Some(neg)) => {
            let offsets = tape.sub(neg, range);
            let raw = tape.quantile(offsets, tau2);
            tape.relu(raw)
        }
    }
}

fn concat_present(tape: &mut Tape, parts: &[Option<Var>]) -> Option<Var> {
    let present: Vec<Var> = parts.iter().flatten().copied().collect();
    match present.len() {
        0 => None,
        1 => Some(present[0]),
        _ => Some(tape.concat_rows(&present)),
    }
}

fn gather(tape: &mut Tape, src: Var, rows: &[usize]) -> Option<Var> {
    (!rows.is_empty()).then(|| tape.gather_rows(src, rows))
}

fn build_episode_graph(
    params: &ModelParams,
    episode: &Episode,
    config: &TrainConfig,
    pns: PnsSource<'_>,
) -> Result<EpisodeGraph> {
    episode.validate()?;
    let dim = params.dim();
    if episode.dim() != dim {
        return Err(GpamError::Schema(format!(
            "episode has dim {}, model expects {dim}",
            episode.dim()
        )));
    }
    let opts = config.options();
    let ways = episode.ways();
    let shots = episode.shots();

    // Row layout: support (class-major), known queries, unknown queries.
    let rows: Vec<&Instance> = episode.all_instances().collect();
    let labels: Vec<Option<usize>> = rows.iter().map(|i| episode.class_of(&i.label)).collect();
    let support_rows = |c: usize| (c * shots..(c + 1) * shots).collect::<Vec<_>>();
    let n_support = ways * shots;

    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let views = view_constants(&mut tape, rows.iter().copied(), dim);
    let level1 = tape.affine(bound.tau1, -1.0, 1.0);

    let mut nodes: Vec<ClassNodes> = Vec::with_capacity(ways);
    let mut dists = Vec::with_capacity(ways);
    let mut ranges = Vec::with_capacity(ways);
    let mut margins = Vec::with_capacity(ways);
    let mut support_negs = Vec::with_capacity(ways);
    for c in 0..ways {
        let n = class_graph(&mut tape, &bound, &episode.support[c], dim, &opts);
        let d = distance_graph(&mut tape, &views, &n.means, &n.vars, n.weights, opts.form);
        let pos = tape.gather_rows(d, &support_rows(c));
        let r = tape.quantile(pos, level1);
        let neg_rows: Vec<usize> = (0..n_support).filter(|&i| i / shots != c).collect();
        let neg = gather(&mut tape, d, &neg_rows);
        let m = margin_node(&mut tape, neg, r, bound.tau2, opts.margin);
        nodes.push(n);
        dists.push(d);
        ranges.push(r);
        margins.push(m);
        support_negs.push(neg);
    }

    let mut pns_skipped = None;
    let points: Vec<ViewPoint> = match pns {
        _ if !config.pns_enabled() => Vec::new(),
        PnsSource::Off => Vec::new(),
        PnsSource::Fixed(p) => p.to_vec(),
        PnsSource::Sample(rng) => {
            let mut protos = Vec::with_capacity(ways);
            for c in 0..ways {
                let (gaussians, weights) = class_values(&tape, &nodes[c])?;
                protos.push(ClassPrototype {
                    relation: episode.known_relations[c].clone(),
                    gaussians,
                    weights,
                    boundary: Boundary {
                        range: tape.scalar(ranges[c]),
                        margin: tape.scalar(margins[c]),
                    },
                });
            }
            match sample_pns(&protos, episode, config, opts.form, rng) {
                Ok(p) => p,
                Err(e @ (GpamError::Sampling(_) | GpamError::Numeric(_))) => {
                    pns_skipped = Some(e.to_string());
                    Vec::new()
                }
                Err(e) => return Err(e),
            }
        }
    };

    let pns_views = (!points.is_empty()).then(|| point_constants(&mut tape, &points, dim));
    let mut class_losses = Vec::with_capacity(ways);
    let mut diagnostics = Vec::with_capacity(ways);
    for c in 0..ways {
        let n = nodes[c];
        let pns_d = pns_views
            .map(|pv| distance_graph(&mut tape, &pv, &n.means, &n.vars, n.weights, opts.form));
        let r = ranges[c];
        let m = if pns_d.is_some() {
            let neg = concat_present(&mut tape, &[support_negs[c], pns_d]);
            margin_node(&mut tape, neg, r, bound.tau2, opts.margin)
        } else {
            margins[c]
        };
        let m = if config.margin_gradient {
            m
        } else {
            tape.detach(m)
        };

        let pos_rows: Vec<usize> = (0..rows.len()).filter(|&i| labels[i] == Some(c)).collect();
        let neg_rows: Vec<usize> = (0..rows.len()).filter(|&i| labels[i] != Some(c)).collect();
        let pos = tape.gather_rows(dists[c], &pos_rows);
        let neg_base = gather(&mut tape, dists[c], &neg_rows);
        let neg = concat_present(&mut tape, &[neg_base, pns_d]);

        let r_sq = tape.square(r);
        let range_term = tape.scale(r_sq, config.lambda);
        let pos_gap = tape.sub(pos, r);
        let pos_logits = tape.scale(pos_gap, config.alpha);
        let pos_lse = tape.log1p_sum_exp(pos_logits);
        let positive_term = tape.scale(pos_lse, 1.0 / config.alpha);
        let negative_term = match neg {
            Some(neg) => {
                let gap = tape.sub(neg, r);
                let gap = tape.sub(gap, m);
                let logits = tape.scale(gap, -config.beta);
                let lse = tape.log1p_sum_exp(logits);
                tape.scale(lse, 1.0 / config.beta)
            }
            None => tape.constant(Matrix::scalar(0.0)),
        };
        let partial = tape.add(range_term, positive_term);
        let total = tape.add(partial, negative_term);

        let diag = ClassDiagnostics {
            relation: episode.known_relations[c].clone(),
            range: tape.scalar(r),
            margin: tape.scalar(m),
            range_term: tape.scalar(range_term),
            positive_term: tape.scalar(positive_term),
            negative_term: tape.scalar(negative_term),
            positives: pos_rows.len(),
            negatives: neg_rows.len() + points.len(),
        };
        if !tape.scalar(total).is_finite() {
            return Err(GpamError::Numeric(format!(
                "non-finite loss for class {c} ({})",
                diag.relation
            )));
        }
        class_losses.push(total);
        diagnostics.push(diag);
    }

    let stacked = tape.concat_rows(&class_losses);
    let sum = tape.sum(stacked);
    let loss = tape.scale(sum, 1.0 / ways as f64);
    let report = EpisodeLoss {
        loss: tape.scalar(loss),
        classes: diagnostics,
        pns: points,
        pns_skipped,
    };
    Ok(EpisodeGraph {
        tape,
        bound,
        loss,
        report,
    })
}

fn sample_pns(
    protos: &[ClassPrototype],
    episode: &Episode,
    config: &TrainConfig,
    form: DistanceForm,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ViewPoint>> {
    let count = pns_count(config.pns_ratio, episode.ways(), episode.shots());
    if count == 0 {
        return Ok(Vec::new());
    }
    let support: Vec<&Instance> = episode.support.iter().flatten().collect();
    let candidates = pns_candidates(
        protos,
        &support,
        count * config.pns_pool_factor,
        config.pns_noise_scale,
        form,
        rng,
    )?;
    let pset = pns_probabilities(candidates, protos, form)?;
    select_pns(
        &pset,
        config.pns_ratio,
        episode.ways(),
        episode.shots(),
        rng,
    )
}

/// Loss of one episode with per-class diagnostics.
pub fn episode_loss(
    params: &ModelParams,
    episode: &Episode,
    config: &TrainConfig,
    pns: PnsSource<'_>,
) -> Result<EpisodeLoss> {
    Ok(build_episode_graph(params, episode, config, pns)?.report)
}

/// Loss and exact gradients of one episode.
pub fn gradients(
    params: &ModelParams,
    episode: &Episode,
    config: &TrainConfig,
    pns: PnsSource<'_>,
) -> Result<(EpisodeLoss, ParamGrads)> {
    let g = build_episode_graph(params, episode, config, pns)?;
    let grads = g.tape.backward(g.loss);
    let out = collect_grads(&grads, &g.bound, params);
    if !out.is_finite() {
        return Err(GpamError::Numeric("non-finite gradient".into()));
    }
    Ok((g.report, out))
}

/// One SGD step with decoupled weight decay on the decayed matrices; the
/// quantile levels move only when `learn_quantiles` is set and are then
/// clamped to `[TAU_MIN, TAU_MAX]`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    lr: f64,
    weight_decay: f64,
    learn_quantiles: bool,
) {
    let ids = ModelParams::tensor_ids();
    for ((p, g), id) in params
        .tensors_mut()
        .into_iter()
        .zip(&grads.tensors)
        .zip(ids)
    {
        let decay = if id.decay { weight_decay } else { 0.0 };
        for (x, gx) in p.data.iter_mut().zip(&g.data) {
            *x -= lr * (gx + decay * *x);
        }
    }
    if learn_quantiles {
        params.levels.tau1 -= lr * grads.tau1;
        params.levels.tau2 -= lr * grads.tau2;
        params.levels.clamp();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: usize,
    pub loss: f64,
    pub r_mean: f64,
    pub m_mean: f64,
}

pub const TRACE_HEADER: &str = "episode,loss,R_mean,M_mean";

impl TraceRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.episode, self.loss, self.r_mean, self.m_mean
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
    /// Episodes whose pseudo-negative sampling was skipped.
    pub pns_skipped: usize,
    /// Episode count at which the early-stop rule fired.
    pub stopped_early: Option<usize>,
}

const STOP_WINDOW: usize = 100;
const STOP_SPAN: usize = 200;
const STOP_TOLERANCE: f64 = 1e-4;

fn moving_average(trace: &[TraceRow], end: usize) -> f64 {
    trace[end - STOP_WINDOW..end]
        .iter()
        .map(|r| r.loss)
        .sum::<f64>()
        / STOP_WINDOW as f64
}

/// True once the moving-average loss has improved by less than the
/// tolerance over the last `STOP_SPAN` episodes.
fn converged(trace: &[TraceRow]) -> bool {
    let n = trace.len();
    n >= STOP_WINDOW + STOP_SPAN
        && moving_average(trace, n - STOP_SPAN) - moving_average(trace, n) < STOP_TOLERANCE
}

pub fn train(
    pool: &InstancePool,
    params: ModelParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(pool, params, config, |_| {})
}

/// Runs the episodic loop, handing every trace row to `observe` as soon as
/// it exists so a caller keeps the trace even if training diverges.
pub fn train_with(
    pool: &InstancePool,
    mut params: ModelParams,
    config: &TrainConfig,
    mut observe: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    params.validate()?;
    let mut trace = Vec::with_capacity(config.episodes);
    let mut skipped = 0;
    let mut stopped_early = None;
    let mut start = 0;
    while start < config.episodes {
        let batch = config.batch.min(config.episodes - start);
        let current = &params;
        let results = config.execution.try_map_indexed(batch, |b| {
            let mut rng = job_rng(config.seed, (start + b) as u64);
            let ep = sample_episode(
                pool,
                config.ways,
                config.shots,
                config.q_known,
                config.nota_rate,
                &mut rng,
            )?;
            gradients(current, &ep, config, PnsSource::Sample(&mut rng)).map_err(|e| match e {
                GpamError::Numeric(m) => GpamError::Numeric(format!("episode {}: {m}", start + b)),
                other => other,
            })
        })?;
        let mut total = ParamGrads::zeros_like(&params);
        for (b, (report, g)) in results.iter().enumerate() {
            total.add_assign(g);
            skipped += usize::from(report.pns_skipped.is_some());
            let row = TraceRow {
                episode: start + b,
                loss: report.loss,
                r_mean: report.mean_range(),
                m_mean: report.mean_margin(),
            };
            observe(&row);
            trace.push(row);
        }
        total.scale(1.0 / batch as f64);
        sgd_step(
            &mut params,
            &total,
            config.lr,
            config.weight_decay,
            config.learn_quantiles,
        );
        if let Err(e) = params.validate() {
            return Err(GpamError::Numeric(format!(
                "parameters diverged after episode {}: {e}",
                start + batch - 1
            )));
        }
        start += batch;
        if config.early_stop && converged(&trace) {
            stopped_early = Some(start);
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        trace,
        pns_skipped: skipped,
        stopped_early,
    })
}

/// `|a - n| / max(|a|, |n|, floor)`, and 0 when both are exactly zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub probes_per_block: usize,
    pub epsilon: f64,
    pub ways: usize,
    pub shots: usize,
    pub q_known: usize,
    pub nota_rate: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 10,
            probes_per_block: 20,
            epsilon: 1e-4,
            ways: 3,
            shots: 2,
            q_known: 4,
            nota_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub block: Block,
    pub max_relative_error: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub trials: usize,
    pub blocks: Vec<BlockError>,
}

impl GradientReport {
    pub fn max_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn block(&self, b: Block) -> Option<&BlockError> {
        self.blocks.iter().find(|e| e.block == b)
    }
}

/// Coordinate of one parameter: `(tensor, element)`, or a quantile level.
#[derive(Debug, Clone, Copy)]
enum Coord {
    Tensor(usize, usize),
    Tau1,
    Tau2,
}

fn perturbed(params: &ModelParams, coord: Coord, delta: f64) -> ModelParams {
    let mut p = params.clone();
    match coord {
        Coord::Tensor(t, i) => p.tensors_mut()[t].data[i] += delta,
        Coord::Tau1 => p.levels.tau1 += delta,
        Coord::Tau2 => p.levels.tau2 += delta,
    }
    p
}

fn analytic(g: &ParamGrads, coord: Coord) -> f64 {
    match coord {
        Coord::Tensor(t, i) => g.tensors[t].data[i],
        Coord::Tau1 => g.tau1,
        Coord::Tau2 => g.tau2,
    }
}

fn block_coords(params: &ModelParams, block: Block) -> Vec<Coord> {
    match block {
        Block::Tau1 => vec![Coord::Tau1],
        Block::Tau2 => vec![Coord::Tau2],
        _ => ModelParams::tensor_ids()
            .iter()
            .zip(params.tensors())
            .enumerate()
            .filter(|(_, (id, _))| id.block == block)
            .flat_map(|(t, (_, m))| (0..m.len()).map(move |i| Coord::Tensor(t, i)))
            .collect(),
    }
}

/// Draws a level whose interpolation position `(n - 1) q` sits at least a
/// tenth of a step away from every knot, so that finite differences never
/// straddle a change of order statistic.
fn level_between_knots<R: Rng + ?Sized>(n: usize, lo: f64, hi: f64, rng: &mut R) -> f64 {
    loop {
        let q = rng.random_range(lo..hi);
        let pos = (n.saturating_sub(1)) as f64 * q;
        let frac = pos - pos.floor();
        if n <= 1 || (0.1..=0.9).contains(&frac) {
            return q;
        }
    }
}

/// Central finite differences against the reverse-mode gradients on
/// `check.trials` random episodes drawn from `pool`. Blocks with fewer
/// coordinates than `probes_per_block` are probed exhaustively.
pub fn grad_check(
    pool: &InstancePool,
    params: &ModelParams,
    config: &TrainConfig,
    check: &GradCheckConfig,
) -> Result<GradientReport> {
    if check.trials == 0 {
        return Err(GpamError::Config(
            "grad-check needs at least one trial".into(),
        ));
    }
    if !(check.epsilon > 0.0) || check.probes_per_block == 0 {
        return Err(GpamError::Config(
            "epsilon must be > 0 and probes >= 1".into(),
        ));
    }
    config.validate()?;
    let per_trial = config.execution.try_map_indexed(check.trials, |t| {
        let mut rng = job_rng(check.seed, t as u64);
        let ep = sample_episode(
            pool,
            check.ways,
            check.shots,
            check.q_known,
            check.nota_rate,
            &mut rng,
        )?;
        let mut p = params.clone();
        let n_pns = if config.pns_enabled() {
            pns_count(config.pns_ratio, check.ways, check.shots)
        } else {
            0
        };
        p.levels.tau1 = 1.0 - level_between_knots(check.shots, 0.55, 0.95, &mut rng);
        p.levels.tau2 =
            level_between_knots((check.ways - 1) * check.shots + n_pns, 0.05, 0.45, &mut rng);

        let pns = episode_loss(&p, &ep, config, PnsSource::Sample(&mut rng))?.pns;
        let (_, g) = gradients(&p, &ep, config, PnsSource::Fixed(&pns))?;
        let loss =
            |q: &ModelParams| episode_loss(q, &ep, config, PnsSource::Fixed(&pns)).map(|l| l.loss);

        let mut errors = Vec::with_capacity(Block::ALL.len());
        for block in Block::ALL {
            let coords = block_coords(&p, block);
            let chosen: Vec<Coord> = if coords.len() <= check.probes_per_block {
                coords
            } else {
                index::sample(&mut rng, coords.len(), check.probes_per_block)
                    .into_iter()
                    .map(|i| coords[i])
                    .collect()
            };
            let mut worst: f64 = 0.0;
            for &c in &chosen {
                let up = loss(&perturbed(&p, c, check.epsilon))?;
                let down = loss(&perturbed(&p, c, -check.epsilon))?;
                let numeric = (up - down) / (2.0 * check.epsilon);
                worst = worst.max(relative_error(analytic(&g, c), numeric));
            }
            errors.push((worst, chosen.len()));
        }
        Ok::<_, GpamError>(errors)
    })?;

    let blocks = Block::ALL
        .iter()
        .enumerate()
        .map(|(b, &block)| BlockError {
            block,
            max_relative_error: per_trial.iter().map(|e| e[b].0).fold(0.0, f64::max),
            probes: per_trial.iter().map(|e| e[b].1).sum(),
        })
        .collect();
    Ok(GradientReport {
        trials: check.trials,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_class_terms() {
        let t = class_terms(&[], &[], 1.5, 0.0, 0.001, 1.0, 3.0);
        assert_eq!(t.total(), 0.001 * 2.25);
        let t = class_terms(&[2.0], &[], 2.0, 0.0, 0.0, 1.0, 3.0);
        assert!((t.total() - std::f64::consts::LN_2).abs() < 1e-12);
        let t = class_terms(&[], &[3.0], 2.0, 1.0, 0.0, 1.0, 3.0);
        assert!((t.total() - std::f64::consts::LN_2 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn variants_round_trip_through_strings() {
        for v in [
            Variant::Full,
            Variant::EuclideanDistance,
            Variant::FixedMargin(0.5),
            Variant::NoMargin,
            Variant::NoPns,
            Variant::EqualWeights,
            Variant::NoSelfAttention,
            Variant::SingleView,
            Variant::SharedPrompt,
            Variant::PoolAll,
        ] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!(
            "fixed-margin=-1".parse::<Variant>(),
            Err(GpamError::Config(_))
        ));
        assert!(matches!(
            "bogus".parse::<Variant>(),
            Err(GpamError::Config(_))
        ));
    }

    #[test]
    fn relative_error_conventions() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_bad_sharpness() {
        let c = TrainConfig {
            alpha: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(GpamError::Config(_))));
    }
}
