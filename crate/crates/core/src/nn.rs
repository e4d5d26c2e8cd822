//! Decoder building blocks: RMSNorm, SwiGLU feed-forward, causal multi-head
//! attention, learned absolute positions, and the output head.
//!
//! Weight structs are generic over the handle type: models store
//! [`ParamId`]s, computations run on bound [`Var`]s.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, Session};

pub const NORM_EPS: f64 = 1e-5;
pub const MASK_VALUE: f64 = -1e9;

/// Feed-forward width for a model width: `8d/3` rounded up to a multiple of 32.
pub fn default_ffn_hidden(d_model: usize) -> usize {
    (8 * d_model).div_ceil(3).div_ceil(32) * 32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub n_heads: usize,
    pub dropout: f64,
    pub norm_eps: f64,
}

/// One decoder layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerParams<P = ParamId> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub w_gate: P,
    pub w_up: P,
    pub w_down: P,
    pub norm1: P,
    pub norm2: P,
}

impl LayerParams<ParamId> {
    pub fn bind<T: Scalar>(&self, s: &Session<'_, T>) -> LayerParams<Var> {
        LayerParams {
            wq: s.param(self.wq),
            wk: s.param(self.wk),
            wv: s.param(self.wv),
            wo: s.param(self.wo),
            w_gate: s.param(self.w_gate),
            w_up: s.param(self.w_up),
            w_down: s.param(self.w_down),
            norm1: s.param(self.norm1),
            norm2: s.param(self.norm2),
        }
    }

    /// In checkpoint manifest order.
    pub fn ids(&self) -> [ParamId; 9] {
        [self.wq, self.wk, self.wv, self.wo, self.w_gate, self.w_up, self.w_down, self.norm1, self.norm2]
    }
}

/// Shared input and output tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingParams<P = ParamId> {
    pub token: P,
    pub position: P,
    pub final_norm: P,
    pub head: P,
}

impl EmbeddingParams<ParamId> {
    pub fn bind<T: Scalar>(&self, s: &Session<'_, T>) -> EmbeddingParams<Var> {
        EmbeddingParams {
            token: s.param(self.token),
            position: s.param(self.position),
            final_norm: s.param(self.final_norm),
            head: s.param(self.head),
        }
    }
}

/// `x / sqrt(mean(x²) + eps) ⊙ gain` over the last axis.
pub fn rms_norm<T: Scalar>(tape: &Tape<T>, x: Var, gain: Var, eps: f64) -> Result<Var> {
    let normed = tape.rms_normalize(x, eps)?;
    tape.mul(normed, gain)
}

/// `(silu(x·W_gate) ⊙ (x·W_up)) · W_down`
pub fn swiglu_ffn<T: Scalar>(tape: &Tape<T>, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let gate = tape.silu(tape.matmul(x, w_gate)?)?;
    let up = tape.matmul(x, w_up)?;
    tape.matmul(tape.mul(gate, up)?, w_down)
}

/// Multi-head scaled dot-product self-attention where position `i` only
/// attends to positions `≤ i`. Input and output are `[B×L×d]`.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    n_heads: usize,
    dropout: f64,
    train: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let shape = tape.shape(x);
    let [b, l, d] = shape[..] else {
        return Err(Error::Shape { op: "causal_attention", detail: format!("expected [B, L, d], got {shape:?}") });
    };
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!("model width {d} is not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let heads = |w: Var, perm: &[usize]| -> Result<Var> {
        let p = tape.reshape(tape.matmul(x, w)?, &[b, l, n_heads, dh])?;
        tape.permute(p, perm)
    };
    let q = heads(wq, &[0, 2, 1, 3])?;
    let k_t = heads(wk, &[0, 2, 3, 1])?;
    let v = heads(wv, &[0, 2, 1, 3])?;

    let scores = tape.scale(tape.matmul(q, k_t)?, T::cast(1.0 / (dh as f64).sqrt()))?;
    let future: Vec<bool> = (0..l * l).map(|i| i % l > i / l).collect();
    let scores = tape.masked_fill(scores, &future, T::cast(MASK_VALUE))?;
    let weights = tape.dropout(tape.softmax(scores, 3)?, dropout, train, rng)?;

    let ctx = tape.permute(tape.matmul(weights, v)?, &[0, 2, 1, 3])?;
    tape.matmul(tape.reshape(ctx, &[b, l, d])?, wo)
}

/// Pre-norm residual block:
/// `h = x + drop(attn(norm(x)))`, `y = h + drop(ffn(norm(h)))`.
pub fn decoder_layer<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    p: &LayerParams<Var>,
    spec: &BlockSpec,
    train: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let a = rms_norm(tape, x, p.norm1, spec.norm_eps)?;
    let a = causal_attention(tape, a, p.wq, p.wk, p.wv, p.wo, spec.n_heads, spec.dropout, train, rng)?;
    let h = tape.add(x, tape.dropout(a, spec.dropout, train, rng)?)?;
    let f = rms_norm(tape, h, p.norm2, spec.norm_eps)?;
    let f = swiglu_ffn(tape, f, p.w_gate, p.w_up, p.w_down)?;
    tape.add(h, tape.dropout(f, spec.dropout, train, rng)?)
}

/// Token rows plus position rows, then dropout. `tokens` is `[B×L]` row-major.
pub fn embed<T: Scalar>(
    tape: &Tape<T>,
    tokens: &[u32],
    batch: usize,
    emb: &EmbeddingParams<Var>,
    dropout: f64,
    train: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let table = tape.shape(emb.token);
    let (vocab, d) = (table[0], table[1]);
    let max_len = tape.shape(emb.position)[0];
    if batch == 0 || !tokens.len().is_multiple_of(batch) {
        return Err(Error::Input(format!("{} tokens do not split into {batch} sequences", tokens.len())));
    }
    let l = tokens.len() / batch;
    if l > max_len {
        return Err(Error::Input(format!("sequence length {l} exceeds context length {max_len}")));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Input(format!("token id {bad} out of range for vocabulary of {vocab}")));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let tok = tape.reshape(tape.gather_rows(emb.token, &ids)?, &[batch, l, d])?;
    let pos = tape.gather_rows(emb.position, &(0..l).collect::<Vec<_>>())?;
    tape.dropout(tape.add(tok, pos)?, dropout, train, rng)
}

/// `rms_norm(x, final gain) · head`, giving `[B×L×V]` logits.
pub fn output_head<T: Scalar>(tape: &Tape<T>, x: Var, emb: &EmbeddingParams<Var>, eps: f64) -> Result<Var> {
    tape.matmul(rms_norm(tape, x, emb.final_norm, eps)?, emb.head)
}
