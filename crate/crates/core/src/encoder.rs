//! Set encoder: prompt-prefixed support embeddings of one view to a
//! diagonal Gaussian `(mean, variance)`.
//!
//! The sequence fed to the attention block is the view's prompt rows
//! followed by the K support rows. The prompt rows are pooled (mean) into a
//! single readout vector, from which two linear heads produce the mean and,
//! through a softplus plus a small floor, the strictly positive variance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_graph, AttentionParams, AttentionVars};
use crate::data::{View, NUM_VIEWS};
use crate::error::{GpamError, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

/// Added to the softplus output so variances stay strictly positive.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Standard deviation of the prompt initialisation.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Rows the readout vector is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Prompt,
    All,
}

/// Learnable prompt rows, one `prompt_len x d` matrix per view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub prompts: [Matrix; NUM_VIEWS],
}

impl PromptBank {
    pub fn init<R: Rng + ?Sized>(prompt_len: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if prompt_len == 0 {
            return Err(GpamError::Config("prompt length must be >= 1".into()));
        }
        Ok(Self {
            prompts: std::array::from_fn(|_| Matrix::normal(prompt_len, dim, PROMPT_INIT_STD, rng)),
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompts[0].rows
    }

    pub fn view(&self, v: View) -> &Matrix {
        &self.prompts[v.index()]
    }
}

/// Encoder weights shared by all four views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub attention: AttentionParams,
    pub w_mean: Matrix,
    pub b_mean: Matrix,
    pub w_var: Matrix,
    pub b_var: Matrix,
    #[serde(default)]
    pub pooling: Pooling,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::init(dim, heads, rng)?,
            w_mean: Matrix::xavier(dim, dim, rng),
            b_mean: Matrix::zeros(1, dim),
            w_var: Matrix::xavier(dim, dim, rng),
            b_var: Matrix::zeros(1, dim),
            pooling: Pooling::Prompt,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_mean.rows
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub attention: AttentionVars,
    pub w_mean: Var,
    pub b_mean: Var,
    pub w_var: Var,
    pub b_var: Var,
    pub pooling: Pooling,
}

/// Per-view Gaussian prototype parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ViewGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let g = Self { mean, var };
        g.validate()?;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.var.len() {
            return Err(GpamError::Schema("mean and variance lengths differ".into()));
        }
        if self.mean.iter().chain(&self.var).any(|x| !x.is_finite()) {
            return Err(GpamError::Numeric("non-finite Gaussian parameters".into()));
        }
        if self.var.iter().any(|&v| v <= 0.0) {
            return Err(GpamError::Numeric(
                "variance must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Graph form: `prompt` is `P x d`, `support` is `K x d`. Returns the
/// `1 x d` mean and variance nodes.
pub fn encode_graph(tape: &mut Tape, prompt: Var, support: Var, p: &EncoderVars) -> (Var, Var) {
    let prompt_len = tape.value(prompt).rows;
    let seq = tape.concat_rows(&[prompt, support]);
    let total = tape.value(seq).rows;
    let (hidden, pooled_rows) = match p.pooling {
        Pooling::Prompt => {
            let rows: Vec<usize> = (0..prompt_len).collect();
            (
                attention_graph(tape, seq, Some(&rows), &p.attention),
                prompt_len,
            )
        }
        Pooling::All => (attention_graph(tape, seq, None, &p.attention), total),
    };
    let pooled = tape.mean_rows(hidden, 0, pooled_rows);
    let mean = tape.matmul(pooled, p.w_mean);
    let mean = tape.add(mean, p.b_mean);
    let raw = tape.matmul(pooled, p.w_var);
    let raw = tape.add(raw, p.b_var);
    let var = tape.softplus(raw);
    let var = tape.affine(var, 1.0, VARIANCE_FLOOR);
    (mean, var)
}

pub(crate) fn bind_attention(
    tape: &mut Tape,
    a: &AttentionParams,
    trainable: bool,
) -> AttentionVars {
    let mut leaf = |m: &Matrix| {
        if trainable {
            tape.param(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    AttentionVars {
        heads: a.heads,
        w_query: leaf(&a.w_query),
        w_key: leaf(&a.w_key),
        w_value: leaf(&a.w_value),
        w_out: leaf(&a.w_out),
    }
}

pub(crate) fn bind_encoder(tape: &mut Tape, p: &EncoderParams, trainable: bool) -> EncoderVars {
    let attention = bind_attention(tape, &p.attention, trainable);
    let mut leaf = |m: &Matrix| {
        if trainable {
            tape.param(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    EncoderVars {
        attention,
        w_mean: leaf(&p.w_mean),
        b_mean: leaf(&p.b_mean),
        w_var: leaf(&p.w_var),
        b_var: leaf(&p.b_var),
        pooling: p.pooling,
    }
}

/// Encodes the K support embeddings of `view` into a [`ViewGaussian`].
pub fn encode_view<S: AsRef<[f64]>>(
    view: View,
    support: &[S],
    prompts: &PromptBank,
    params: &EncoderParams,
) -> Result<ViewGaussian> {
    if support.is_empty() {
        return Err(GpamError::Input(
            "encoder needs at least one support embedding".into(),
        ));
    }
    let dim = params.dim();
    if support.iter().any(|s| s.as_ref().len() != dim) || prompts.view(view).cols != dim {
        return Err(GpamError::Schema(format!(
            "encoder expects dimension {dim}"
        )));
    }
    let mut tape = Tape::new();
    let vars = bind_encoder(&mut tape, params, false);
    let prompt = tape.constant(prompts.view(view).clone());
    let support = tape.constant(Matrix::from_rows(support));
    let (mean, var) = encode_graph(&mut tape, prompt, support, &vars);
    let g = ViewGaussian {
        mean: tape.value(mean).data.clone(),
        var: tape.value(var).data.clone(),
    };
    if !g.mean.iter().chain(&g.var).all(|v| v.is_finite()) {
        return Err(GpamError::Numeric(
            "encoder produced non-finite activations".into(),
        ));
    }
    Ok(g)
}
