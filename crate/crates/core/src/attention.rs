//! Multi-head self-attention block without positional encoding.
//!
//! For input rows `X` (and query rows `Xq`, a subset of `X`):
//!
//! ```text
//! Q = Xq Wq,  K = X Wk,  V = X Wv
//! head_h = softmax(Q_h K_h^T / sqrt(d_h)) V_h
//! out = Xq + concat(head_1, .., head_H) Wo
//! ```
//!
//! Without positions the output for a query row is invariant to any
//! permutation of the key/value rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpamError, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: usize,
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
    pub w_out: Matrix,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(GpamError::Config(format!(
                "{heads} attention heads do not divide width {width}"
            )));
        }
        Ok(Self {
            heads,
            w_query: Matrix::xavier(width, width, rng),
            w_key: Matrix::xavier(width, width, rng),
            w_value: Matrix::xavier(width, width, rng),
            w_out: Matrix::xavier(width, width, rng),
        })
    }

    pub fn width(&self) -> usize {
        self.w_query.rows
    }
}

/// Tape handles for an [`AttentionParams`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub heads: usize,
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
    pub w_out: Var,
}

/// Applies the block to `x`. When `query_rows` is given only those rows
/// attend (and only those rows are returned); all rows serve as keys/values.
pub fn attention_graph(
    tape: &mut Tape,
    x: Var,
    query_rows: Option<&[usize]>,
    p: &AttentionVars,
) -> Var {
    let xq = match query_rows {
        Some(rows) => tape.gather_rows(x, rows),
        None => x,
    };
    let q = tape.matmul(xq, p.w_query);
    let k = tape.matmul(x, p.w_key);
    let v = tape.matmul(x, p.w_value);
    let width = tape.value(q).cols;
    let head_width = width / p.heads;
    let scale = 1.0 / (head_width as f64).sqrt();

    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            let (s, e) = (h * head_width, (h + 1) * head_width);
            (
                tape.slice_cols(q, s, e),
                tape.slice_cols(k, s, e),
                tape.slice_cols(v, s, e),
            )
        };
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh));
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    };
    let projected = tape.matmul(joined, p.w_out);
    tape.add(xq, projected)
}
