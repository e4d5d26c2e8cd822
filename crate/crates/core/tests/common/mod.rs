//! Test oracles shared by the integration suites.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use treecoder::nn;
use treecoder::selector::{self, argmax};
use treecoder::tree;
use treecoder::{RouteRecord, RoutingMode, Session, TreeCoderModel, TreeConfig};

pub fn tiny(k: usize, h: usize, dec: usize) -> TreeConfig {
    TreeConfig {
        k,
        h,
        dec,
        d_model: 16,
        n_heads: 2,
        ffn_hidden: 32,
        context_len: 8,
        vocab_size: 32,
        selector_hidden_mult: 2,
        dropout: 0.0,
        routing: RoutingMode::Learned,
        norm_eps: nn::NORM_EPS,
    }
}

pub fn tokens(batch: usize, len: usize, vocab: u32, seed: u64) -> Vec<u32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch * len).map(|_| rng.gen_range(0..vocab)).collect()
}

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Runs one sequence alone, node by node, in learned mode.
///
/// With `frozen = None` the path is chosen by argmax and activations are not
/// rescaled. With a recorded route the same path is followed and activations
/// are multiplied by `p(θ)/p₀`, where `p₀` is the recorded probability: the
/// function whose ordinary derivative the grad trick produces.
pub fn reference_logits(
    model: &TreeCoderModel<f64>,
    seq: &[u32],
    mask: &[bool],
    frozen: Option<&RouteRecord>,
) -> (Vec<f64>, Vec<usize>) {
    let cfg = &model.config;
    let s = Session::new(&model.params);
    let tape = s.tape();
    let emb = model.embeddings.bind(&s);
    let spec = cfg.block_spec();
    let mut x = nn::embed(tape, seq, 1, &emb, 0.0, false, &mut rng()).unwrap();
    let mut node = 0;
    let mut path = vec![0];
    for level in 0..=cfg.h {
        for layer in &model.nodes[node] {
            x = nn::decoder_layer(tape, x, &layer.bind(&s), &spec, false, &mut rng()).unwrap();
        }
        if level == cfg.h {
            break;
        }
        let choice = if cfg.k == 1 {
            0
        } else {
            let pooled = selector::mean_pool(tape, x, mask).unwrap();
            let logits = selector::selector_logits(tape, pooled, &model.selectors[node].bind(&s)).unwrap();
            let probs = tape.softmax(logits, 1).unwrap();
            match frozen {
                None => argmax(&tape.value(probs)),
                Some(route) => {
                    let c = route.child_choices[level];
                    let p = tape.gather_rows(tape.reshape(probs, &[cfg.k]).unwrap(), &[c]).unwrap();
                    let scale = tape.scale(p, 1.0 / route.probabilities[level][c]).unwrap();
                    let scale = tape.reshape(scale, &[1, 1, 1]).unwrap();
                    x = tape.mul(x, scale).unwrap();
                    c
                }
            }
        };
        node = tree::child(cfg.k, node, choice);
        path.push(node);
    }
    let logits = nn::output_head(tape, x, &emb, cfg.norm_eps).unwrap();
    (tape.value(logits), path)
}

/// Summed next-token negative log-likelihood, computed directly from logits.
pub fn nll_sum(logits: &[f64], targets: &[usize], vocab: usize) -> f64 {
    logits
        .chunks(vocab)
        .zip(targets)
        .map(|(row, &t)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Redraws every parameter at unit activation scale: fan-in scaled normal
/// matrices, unit-normal tables, gains near 1. At the training init the
/// selector gradients sit below finite-difference resolution.
pub fn rescale(model: &mut TreeCoderModel<f64>, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.iter_mut() {
        let fan_in = if p.value.shape.len() == 2 && !p.name.starts_with("embed") { p.value.shape[0] } else { 1 };
        let n = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
        let gain = p.name.contains("norm");
        for v in p.value.data.iter_mut() {
            *v = if gain { 1.0 + 0.1 * n.sample(&mut r) } else { n.sample(&mut r) };
        }
    }
}

/// Two sub-languages over disjoint alphabets (`a`–`m` and `n`–`z`), each a
/// sparse first-order Markov chain with its own transition table. Every line
/// is written in one language, chosen at random. `language_seed` fixes the
/// transition tables, `text_seed` the sampled text.
pub fn two_language_corpus(lines: usize, line_len: usize, language_seed: u64, text_seed: u64) -> String {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(language_seed);
    let alphabets: [Vec<u8>; 2] = [(b'a'..=b'm').collect(), (b'n'..=b'z').collect()];
    // Each letter may be followed by one of three letters of its own alphabet.
    let tables: Vec<Vec<[u8; 3]>> = alphabets
        .iter()
        .map(|a| {
            (0..a.len())
                .map(|_| [a[rng.gen_range(0..a.len())], a[rng.gen_range(0..a.len())], a[rng.gen_range(0..a.len())]])
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(text_seed);
    let mut out = String::new();
    for _ in 0..lines {
        let lang = rng.gen_range(0..2);
        let a = &alphabets[lang];
        let mut c = a[rng.gen_range(0..a.len())];
        for i in 0..line_len {
            if i > 0 && i % 6 == 0 {
                out.push(' ');
            }
            out.push(c as char);
            c = tables[lang][(c - a[0]) as usize][rng.gen_range(0..3)];
        }
        out.push('\n');
    }
    out
}
