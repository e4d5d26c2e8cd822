//! Branch selectors.
//!
//! A selector mean-pools its node's output over the non-pad positions of
//! each sequence, runs a gated MLP down to `k` logits, and routes the whole
//! sequence to the most probable child. To keep the selector trainable
//! despite the hard argmax, the node output is multiplied by
//! `p_max / constant(p_max)`: exactly 1 in value, but its gradient reaches
//! the selector weights through `p_max`.

use rand::{Rng, RngCore};

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, Session};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectorParams<P = ParamId> {
    pub w_gate: P,
    pub w_up: P,
    pub w_out: P,
}

impl SelectorParams<ParamId> {
    pub fn bind<T: Scalar>(&self, s: &Session<'_, T>) -> SelectorParams<Var> {
        SelectorParams { w_gate: s.param(self.w_gate), w_up: s.param(self.w_up), w_out: s.param(self.w_out) }
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w_gate, self.w_up, self.w_out]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorDecision {
    pub child_index: usize,
    pub probabilities: Vec<f64>,
    /// Forward value of the grad-trick scalar; always exactly 1.
    pub grad_trick: f64,
}

/// Decisions for a batch plus the `[B]` grad-trick array that carries
/// gradient back into the selector.
#[derive(Debug, Clone)]
pub struct Selection {
    pub decisions: Vec<SelectorDecision>,
    pub grad_trick: Var,
}

/// Mean over the non-pad positions of `x: [B×L×d]`. `pad_mask` is `[B×L]`,
/// `true` at padding.
pub fn mean_pool<T: Scalar>(tape: &Tape<T>, x: Var, pad_mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(x);
    let [b, l, _] = shape[..] else {
        return Err(Error::Shape { op: "mean_pool", detail: format!("expected [B, L, d], got {shape:?}") });
    };
    if pad_mask.len() != b * l {
        return Err(Error::Dimension { op: "mean_pool", lhs: shape, rhs: vec![pad_mask.len()] });
    }
    let mut weights = vec![T::zero(); b * l];
    for (row, mask) in pad_mask.chunks(l).enumerate() {
        let live = mask.iter().filter(|&&p| !p).count();
        if live == 0 {
            return Err(Error::Input(format!("sequence {row} is entirely padding")));
        }
        let w = T::one() / T::cast(live as f64);
        for (t, &p) in mask.iter().enumerate() {
            if !p {
                weights[row * l + t] = w;
            }
        }
    }
    let w = tape.constant_from(vec![b, l, 1], weights)?;
    tape.sum_axis(tape.mul(x, w)?, 1, false)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Gated-MLP logits for pooled `[B×d]` input: `(silu(x·W_gate) ⊙ (x·W_up)) · W_out`.
pub fn selector_logits<T: Scalar>(tape: &Tape<T>, pooled: Var, p: &SelectorParams<Var>) -> Result<Var> {
    let gate = tape.silu(tape.matmul(pooled, p.w_gate)?)?;
    let up = tape.matmul(pooled, p.w_up)?;
    tape.matmul(tape.mul(gate, up)?, p.w_out)
}

/// Softmax routing decision for every row of `pooled: [B×d]`.
pub fn select<T: Scalar>(tape: &Tape<T>, pooled: Var, p: &SelectorParams<Var>) -> Result<Selection> {
    let logits = selector_logits(tape, pooled, p)?;
    select_from_logits(tape, logits)
}

/// Routing decision from precomputed `[B×k]` logits.
pub fn select_from_logits<T: Scalar>(tape: &Tape<T>, logits: Var) -> Result<Selection> {
    let shape = tape.shape(logits);
    let [b, k] = shape[..] else {
        return Err(Error::Shape { op: "select", detail: format!("expected [B, k] logits, got {shape:?}") });
    };
    if tape.with_value(logits, |v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Numeric("selector produced non-finite logits".into()));
    }
    let probs = tape.softmax(logits, 1)?;
    let values: Vec<f64> = tape.with_value(probs, |v| v.iter().map(|x| x.as_f64()).collect());
    let mut picks = Vec::with_capacity(b);
    let mut decisions = Vec::with_capacity(b);
    for (row, p) in values.chunks(k).enumerate() {
        let child = argmax(p);
        picks.push(row * k + child);
        decisions.push(SelectorDecision { child_index: child, probabilities: p.to_vec(), grad_trick: 0.0 });
    }
    let p_max = tape.gather_rows(tape.reshape(probs, &[b * k])?, &picks)?;
    let grad_trick = tape.div(p_max, tape.constant_view(p_max)?)?;
    tape.with_value(grad_trick, |v| {
        for (d, &t) in decisions.iter_mut().zip(v) {
            d.grad_trick = t.as_f64();
        }
    });
    Ok(Selection { decisions, grad_trick })
}

/// Uniformly random child; no selector network is evaluated.
pub fn select_random(k: usize, rng: &mut dyn RngCore) -> Result<SelectorDecision> {
    if k < 2 {
        return Err(Error::Config(format!("random selection needs k >= 2, got {k}")));
    }
    Ok(SelectorDecision {
        child_index: rng.gen_range(0..k),
        probabilities: vec![1.0 / k as f64; k],
        grad_trick: 1.0,
    })
}
