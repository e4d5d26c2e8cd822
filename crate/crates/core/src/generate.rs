//! Autoregressive sampling.

use rand::distributions::{Distribution, WeightedIndex};
use rand::RngCore;

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::model::{RouteRecord, TreeCoderModel};
use crate::params::Session;
use crate::tokenizer::EOS;

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Emitted tokens, excluding the prompt and any final EOS.
    pub tokens: Vec<u32>,
    /// Route of the forward pass that produced each emitted token.
    pub routes: Vec<RouteRecord>,
    pub stopped_at_eos: bool,
}

/// Extends `prompt` one token at a time, re-running the full tree forward on
/// the last `context_len` tokens. `temperature = 0` is greedy.
pub fn generate<T: Scalar>(
    model: &TreeCoderModel<T>,
    prompt: &[u32],
    max_tokens: usize,
    temperature: f64,
    rng: &mut dyn RngCore,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Input("prompt must hold at least one token".into()));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Input(format!("temperature must be finite and non-negative, got {temperature}")));
    }
    let (v, window) = (model.config.vocab_size, model.config.context_len);
    let mut context = prompt.to_vec();
    let mut out = Generation { tokens: Vec::new(), routes: Vec::new(), stopped_at_eos: false };
    for _ in 0..max_tokens {
        let input = &context[context.len().saturating_sub(window)..];
        let s = Session::new(&model.params);
        let fwd = model.forward(&s, input, &vec![false; input.len()], 1, false, rng)?;
        let last: Vec<f64> =
            s.tape().with_value(fwd.logits, |l| l[(input.len() - 1) * v..].iter().map(|x| x.as_f64()).collect());
        let next = if temperature == 0.0 { argmax(&last) } else { sample(&last, temperature, rng)? } as u32;
        out.routes.extend(fwd.routes);
        if next == EOS {
            out.stopped_at_eos = true;
            break;
        }
        out.tokens.push(next);
        context.push(next);
    }
    Ok(out)
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f64], temperature: f64, rng: &mut dyn RngCore) -> Result<usize> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Numeric(format!("cannot sample: {e}")))?;
    Ok(dist.sample(rng))
}
