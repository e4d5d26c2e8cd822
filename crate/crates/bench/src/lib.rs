//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treecoder::{Batch, TreeConfig};

/// The small width used for the synthetic experiments: d=64, L=32, V=300.
pub fn small_config(k: usize, h: usize, dec: usize) -> TreeConfig {
    let mut cfg = TreeConfig::with_shape(k, h, dec, 64);
    cfg.context_len = 32;
    cfg.vocab_size = 300;
    cfg
}

pub fn random_batch(cfg: &TreeConfig, batch_size: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch_size * cfg.context_len;
    let inputs: Vec<u32> = (0..n).map(|_| rng.gen_range(3..cfg.vocab_size as u32)).collect();
    let targets = (0..n).map(|_| rng.gen_range(3..cfg.vocab_size)).collect();
    Batch { inputs, targets, pad_mask: vec![false; n], batch_size, seq_len: cfg.context_len, target_count: n }
}

/// Lowercase text with a skewed letter distribution, so BPE finds merges.
pub fn text_corpus(lines: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..lines {
        for w in 0..rng.gen_range(4..12) {
            if w > 0 {
                out.push(b' ');
            }
            for _ in 0..rng.gen_range(2..8) {
                let r: f64 = rng.gen();
                out.push(b'a' + (r * r * 26.0) as u8);
            }
        }
        out.push(b'\n');
    }
    out
}
