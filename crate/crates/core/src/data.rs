//! Corpus packing and deterministic batching.
//!
//! Every non-empty line becomes `BOS … EOS`; lines and then files are
//! concatenated into one stream, which is cut into windows of `context_len`.
//! The target of a position is the next token of the stream, so the last
//! position of a window predicts the first token of the following one.
//! Positions past the end of the stream hold `PAD` and are never scored.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, PAD};

#[derive(Debug, Clone, PartialEq)]
pub struct PackedDataset {
    /// `[N×L]` input ids, row-major.
    pub sequences: Vec<u32>,
    /// `[N×L]` next-token ids; `PAD` where nothing follows.
    pub targets: Vec<u32>,
    /// `[N×L]`, true at padding positions of `sequences`.
    pub pad_mask: Vec<bool>,
    pub context_len: usize,
}

/// One batch, rows in the order they were drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<usize>,
    pub pad_mask: Vec<bool>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Positions whose target is scored.
    pub target_count: usize,
}

/// Token stream of one text: every non-empty line wrapped in BOS/EOS.
pub fn encode_text(text: &[u8], vocab: &Vocab) -> Vec<u32> {
    let mut stream = Vec::new();
    for line in text.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
        stream.extend(vocab.encode(line, true));
    }
    stream
}

impl PackedDataset {
    /// Cuts `stream` into windows of `context_len`.
    pub fn from_stream(stream: &[u32], context_len: usize) -> Result<Self> {
        if context_len == 0 {
            return Err(Error::Config("context_len must be positive".into()));
        }
        if stream.is_empty() {
            return Err(Error::Input("corpus produced no tokens".into()));
        }
        let n = stream.len().div_ceil(context_len);
        let total = n * context_len;
        let mut sequences = vec![PAD; total];
        let mut targets = vec![PAD; total];
        let mut pad_mask = vec![true; total];
        sequences[..stream.len()].copy_from_slice(stream);
        targets[..stream.len() - 1].copy_from_slice(&stream[1..]);
        pad_mask[..stream.len()].iter_mut().for_each(|m| *m = false);
        Ok(Self { sequences, targets, pad_mask, context_len })
    }

    /// Packs texts concatenated in order.
    pub fn from_texts(texts: &[&[u8]], vocab: &Vocab, context_len: usize) -> Result<Self> {
        let stream: Vec<u32> = texts.iter().flat_map(|t| encode_text(t, vocab)).collect();
        Self::from_stream(&stream, context_len)
    }

    /// Reads and packs files concatenated in argument order.
    pub fn load_and_pack<P: AsRef<Path>>(paths: &[P], vocab: &Vocab, context_len: usize) -> Result<Self> {
        let mut texts = Vec::with_capacity(paths.len());
        for p in paths {
            let p = p.as_ref();
            texts.push(std::fs::read(p).map_err(|e| Error::Input(format!("cannot read {}: {e}", p.display())))?);
        }
        let refs: Vec<&[u8]> = texts.iter().map(Vec::as_slice).collect();
        Self::from_texts(&refs, vocab, context_len)
    }

    pub fn len(&self) -> usize {
        self.sequences.len() / self.context_len
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Non-padding input tokens.
    pub fn token_count(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| !m).count()
    }

    /// Positions whose target is scored.
    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|&&t| t != PAD).count()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.sequences[i * self.context_len..(i + 1) * self.context_len]
    }

    /// Assembles the given rows into a batch.
    pub fn batch(&self, rows: &[usize]) -> Batch {
        let l = self.context_len;
        let mut inputs = Vec::with_capacity(rows.len() * l);
        let mut targets = Vec::with_capacity(rows.len() * l);
        let mut pad_mask = Vec::with_capacity(rows.len() * l);
        for &r in rows {
            let span = r * l..(r + 1) * l;
            inputs.extend_from_slice(&self.sequences[span.clone()]);
            targets.extend(self.targets[span.clone()].iter().map(|&t| t as usize));
            pad_mask.extend_from_slice(&self.pad_mask[span]);
        }
        let target_count = targets.iter().filter(|&&t| t != PAD as usize).count();
        Batch { inputs, targets, pad_mask, batch_size: rows.len(), seq_len: l, target_count }
    }

    /// Row order for `epoch`: a permutation drawn from `seed` on a stream
    /// selected by the epoch index.
    pub fn permutation(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Shuffled batches for one epoch; the final short batch is kept.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<impl Iterator<Item = Batch> + '_> {
        check_batch_size(batch_size)?;
        let order = self.permutation(seed, epoch);
        Ok((0..order.len().div_ceil(batch_size)).map(move |b| {
            let end = ((b + 1) * batch_size).min(order.len());
            self.batch(&order[b * batch_size..end])
        }))
    }

    /// Batches in dataset order, for evaluation.
    pub fn sequential(&self, batch_size: usize) -> Result<impl Iterator<Item = Batch> + '_> {
        check_batch_size(batch_size)?;
        let n = self.len();
        Ok((0..n.div_ceil(batch_size)).map(move |b| {
            let rows: Vec<usize> = (b * batch_size..((b + 1) * batch_size).min(n)).collect();
            self.batch(&rows)
        }))
    }
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    Ok(())
}
