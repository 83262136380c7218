//! All learnable state, its binding onto a [`Tape`], checkpoints, and
//! prototype construction at inference time.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionVars;
use crate::boundary::{
    compute_margin, compute_range, BandPolicy, Boundary, ClassPrototype, QuantileLevels,
};
use crate::data::{Instance, NUM_VIEWS};
use crate::encoder::{encode_graph, EncoderParams, EncoderVars, PromptBank, ViewGaussian};
use crate::error::{GpamError, Result};
use crate::matrix::Matrix;
use crate::metric::{
    mixture_graph, prototype_distance, DistanceForm, MixtureParams, MixtureVars, ViewWeights,
    WeightMode,
};
use crate::tape::{Tape, Var};

pub const CHECKPOINT_FORMAT: &str = "gpam-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameter groups reported separately by the gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Block {
    Theta,
    Phi1,
    Phi2,
    Prompts,
    Tau1,
    Tau2,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::Theta,
        Block::Phi1,
        Block::Phi2,
        Block::Prompts,
        Block::Tau1,
        Block::Tau2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Theta => "theta",
            Block::Phi1 => "phi1",
            Block::Phi2 => "phi2",
            Block::Prompts => "prompts",
            Block::Tau1 => "tau1",
            Block::Tau2 => "tau2",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamId {
    pub block: Block,
    pub name: &'static str,
    /// Whether weight decay applies (projection and head matrices only).
    pub decay: bool,
}

const TENSOR_IDS: [ParamId; 18] = {
    const fn id(block: Block, name: &'static str, decay: bool) -> ParamId {
        ParamId { block, name, decay }
    }
    [
        id(Block::Prompts, "prompt.main", false),
        id(Block::Prompts, "prompt.head", false),
        id(Block::Prompts, "prompt.tail", false),
        id(Block::Prompts, "prompt.context", false),
        id(Block::Theta, "encoder.w_query", true),
        id(Block::Theta, "encoder.w_key", true),
        id(Block::Theta, "encoder.w_value", true),
        id(Block::Theta, "encoder.w_out", true),
        id(Block::Theta, "encoder.w_mean", true),
        id(Block::Theta, "encoder.b_mean", false),
        id(Block::Theta, "encoder.w_var", true),
        id(Block::Theta, "encoder.b_var", false),
        id(Block::Phi1, "mixture.w_query", true),
        id(Block::Phi1, "mixture.w_key", true),
        id(Block::Phi1, "mixture.w_value", true),
        id(Block::Phi1, "mixture.w_out", true),
        id(Block::Phi2, "mixture.w_score", true),
        id(Block::Phi2, "mixture.b_score", false),
    ]
};

/// Prompts, encoder, mixture block and quantile levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub prompts: PromptBank,
    pub encoder: EncoderParams,
    pub mixture: MixtureParams,
    pub levels: QuantileLevels,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        prompt_len: usize,
        heads: usize,
        levels: QuantileLevels,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(GpamError::Config("dimension must be >= 1".into()));
        }
        levels.validate()?;
        Ok(Self {
            prompts: PromptBank::init(prompt_len, dim, rng)?,
            encoder: EncoderParams::init(dim, heads, rng)?,
            mixture: MixtureParams::init(dim, heads, rng)?,
            levels,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn tensor_ids() -> &'static [ParamId] {
        &TENSOR_IDS
    }

    /// Every matrix in the fixed order of [`ModelParams::tensor_ids`].
    pub fn tensors(&self) -> [&Matrix; 18] {
        let [p0, p1, p2, p3] = &self.prompts.prompts;
        let e = &self.encoder;
        let m = &self.mixture;
        [
            p0,
            p1,
            p2,
            p3,
            &e.attention.w_query,
            &e.attention.w_key,
            &e.attention.w_value,
            &e.attention.w_out,
            &e.w_mean,
            &e.b_mean,
            &e.w_var,
            &e.b_var,
            &m.attention.w_query,
            &m.attention.w_key,
            &m.attention.w_value,
            &m.attention.w_out,
            &m.w_score,
            &m.b_score,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 18] {
        let [p0, p1, p2, p3] = &mut self.prompts.prompts;
        let e = &mut self.encoder;
        let m = &mut self.mixture;
        [
            p0,
            p1,
            p2,
            p3,
            &mut e.attention.w_query,
            &mut e.attention.w_key,
            &mut e.attention.w_value,
            &mut e.attention.w_out,
            &mut e.w_mean,
            &mut e.b_mean,
            &mut e.w_var,
            &mut e.b_var,
            &mut m.attention.w_query,
            &mut m.attention.w_key,
            &mut m.attention.w_value,
            &mut m.attention.w_out,
            &mut m.w_score,
            &mut m.b_score,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (id, t) in TENSOR_IDS.iter().zip(self.tensors()) {
            if !t.is_finite() {
                return Err(GpamError::Numeric(format!(
                    "parameter {} is not finite",
                    id.name
                )));
            }
        }
        self.levels.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(GpamError::Schema(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let p = ck.params;
        let d = p.dim();
        let shapes_ok = p.prompts.prompts.iter().all(|m| m.cols == d && m.rows >= 1)
            && p.mixture.w_score.cols == 2 * d
            && p.mixture.attention.width() == 2 * d
            && p.encoder.attention.width() == d;
        if !shapes_ok {
            return Err(GpamError::Schema(
                "checkpoint matrices have inconsistent shapes".into(),
            ));
        }
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: ModelParams,
}

/// Gradient bundle shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Matrix>,
    pub tau1: f64,
    pub tau2: f64,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params
                .tensors()
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect(),
            tau1: 0.0,
            tau2: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
        self.tau1 += other.tau1;
        self.tau2 += other.tau2;
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.tensors {
            a.scale_assign(s);
        }
        self.tau1 *= s;
        self.tau2 *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite) && self.tau1.is_finite() && self.tau2.is_finite()
    }
}

/// How `M_c` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginMode {
    #[default]
    Adaptive,
    Fixed(f64),
}

/// Switches shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelOptions {
    pub form: DistanceForm,
    pub weights: WeightMode,
    pub margin: MarginMode,
    pub band: BandPolicy,
    /// Use the main-view prompt for every view.
    pub shared_prompt: bool,
}

/// Tape handles for every parameter.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub prompts: [Var; NUM_VIEWS],
    pub encoder: EncoderVars,
    pub mixture: MixtureVars,
    pub tau1: Var,
    pub tau2: Var,
    pub tensors: Vec<Var>,
}

/// Places the parameters on `tape` as differentiable leaves.
pub fn bind(tape: &mut Tape, params: &ModelParams) -> BoundModel {
    let t: Vec<Var> = params
        .tensors()
        .iter()
        .map(|m| tape.param((*m).clone()))
        .collect();
    let tau1 = tape.scalar_var(params.levels.tau1);
    let tau2 = tape.scalar_var(params.levels.tau2);
    let attention = |heads, o: usize| AttentionVars {
        heads,
        w_query: t[o],
        w_key: t[o + 1],
        w_value: t[o + 2],
        w_out: t[o + 3],
    };
    BoundModel {
        prompts: [t[0], t[1], t[2], t[3]],
        encoder: EncoderVars {
            attention: attention(params.encoder.attention.heads, 4),
            w_mean: t[8],
            b_mean: t[9],
            w_var: t[10],
            b_var: t[11],
            pooling: params.encoder.pooling,
        },
        mixture: MixtureVars {
            attention: attention(params.mixture.attention.heads, 12),
            w_score: t[16],
            b_score: t[17],
        },
        tau1,
        tau2,
        tensors: t,
    }
}

/// Collects the gradient of every bound parameter.
pub fn collect_grads(
    grads: &crate::tape::Gradients,
    bound: &BoundModel,
    params: &ModelParams,
) -> ParamGrads {
    ParamGrads {
        tensors: bound
            .tensors
            .iter()
            .zip(params.tensors())
            .map(|(v, m)| grads.get_or_zeros(*v, m.shape()))
            .collect(),
        tau1: grads.get(bound.tau1).map(|g| g.data[0]).unwrap_or(0.0),
        tau2: grads.get(bound.tau2).map(|g| g.data[0]).unwrap_or(0.0),
    }
}

/// Per-class Gaussian and weight nodes.
#[derive(Debug, Clone, Copy)]
pub struct ClassNodes {
    pub means: [Var; NUM_VIEWS],
    pub vars: [Var; NUM_VIEWS],
    pub weights: Var,
}

/// Stacks view `j` of `instances` into an `n x d` matrix.
pub fn view_matrix<'a>(
    instances: impl IntoIterator<Item = &'a Instance>,
    j: usize,
    dim: usize,
) -> Matrix {
    let mut data = Vec::new();
    let mut rows = 0;
    for inst in instances {
        data.extend_from_slice(&inst.views[j]);
        rows += 1;
    }
    Matrix::from_vec(rows, dim, data)
}

/// Encodes one class's support into its view Gaussians and mixture weights.
pub fn class_graph(
    tape: &mut Tape,
    bound: &BoundModel,
    support: &[Instance],
    dim: usize,
    opts: &ModelOptions,
) -> ClassNodes {
    let mut means = [bound.prompts[0]; NUM_VIEWS];
    let mut vars = [bound.prompts[0]; NUM_VIEWS];
    for j in 0..NUM_VIEWS {
        let x = tape.constant(view_matrix(support, j, dim));
        let prompt = if opts.shared_prompt {
            bound.prompts[0]
        } else {
            bound.prompts[j]
        };
        let (m, v) = encode_graph(tape, prompt, x, &bound.encoder);
        means[j] = m;
        vars[j] = v;
    }
    let weights = mixture_graph(tape, &means, &vars, &bound.mixture, opts.weights);
    ClassNodes {
        means,
        vars,
        weights,
    }
}

/// Reads a class's Gaussians and weights off the tape.
pub fn class_values(
    tape: &Tape,
    nodes: &ClassNodes,
) -> Result<([ViewGaussian; NUM_VIEWS], ViewWeights)> {
    let mut gs = Vec::with_capacity(NUM_VIEWS);
    for j in 0..NUM_VIEWS {
        gs.push(ViewGaussian::new(
            tape.value(nodes.means[j]).data.clone(),
            tape.value(nodes.vars[j]).data.clone(),
        )?);
    }
    let w = tape.value(nodes.weights);
    if !w.is_finite() {
        return Err(GpamError::Numeric("non-finite view weights".into()));
    }
    let gaussians: [ViewGaussian; NUM_VIEWS] = gs.try_into().expect("four views");
    Ok((gaussians, ViewWeights(std::array::from_fn(|j| w.data[j]))))
}

/// Prototypes from support only: range from the class's own shots, margin
/// from the other classes' shots.
pub fn build_prototypes(
    params: &ModelParams,
    relations: &[String],
    support: &[Vec<Instance>],
    opts: &ModelOptions,
) -> Result<Vec<ClassPrototype>> {
    if support.is_empty() || support.iter().any(Vec::is_empty) {
        return Err(GpamError::Input(
            "every class needs at least one support instance".into(),
        ));
    }
    let dim = params.dim();
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let mut out = Vec::with_capacity(support.len());
    for (c, shots) in support.iter().enumerate() {
        let nodes = class_graph(&mut tape, &bound, shots, dim, opts);
        let (gaussians, weights) = class_values(&tape, &nodes)?;
        let dist = |x: &Instance| prototype_distance(&x.views, &gaussians, &weights, opts.form);
        let pos = shots.iter().map(dist).collect::<Result<Vec<_>>>()?;
        let neg = support
            .iter()
            .enumerate()
            .filter(|(o, _)| *o != c)
            .flat_map(|(_, s)| s.iter())
            .map(dist)
            .collect::<Result<Vec<_>>>()?;
        let range = compute_range(&pos, params.levels.tau1)?;
        let margin = match opts.margin {
            MarginMode::Fixed(m) => m,
            MarginMode::Adaptive if neg.is_empty() => 0.0,
            MarginMode::Adaptive => compute_margin(&neg, range, params.levels.tau2)?,
        };
        let proto = ClassPrototype {
            relation: relations.get(c).cloned().unwrap_or_else(|| c.to_string()),
            gaussians,
            weights,
            boundary: Boundary { range, margin },
        };
        proto.validate()?;
        out.push(proto);
    }
    Ok(out)
}
