//! Byte-level BPE with byte fallback.
//!
//! Ids: `PAD = 0`, `BOS = 1`, `EOS = 2`, then the 256 single-byte pieces
//! (`3 + byte`), then one id per learned merge in learned order. Text is not
//! normalized and whitespace is not pre-split, so pieces may span spaces and
//! whitespace-only pieces are allowed. Newlines are hard boundaries: no
//! merge is learned across or into a `\n`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const BYTE_OFFSET: u32 = 3;
/// First id assigned to a learned merge.
pub const FIRST_MERGE: u32 = BYTE_OFFSET + 256;

const SPECIAL_PIECES: [&str; 3] = ["<pad>", "<s>", "</s>"];
const FORMAT_VERSION: u32 = 1;

pub fn byte_id(b: u8) -> u32 {
    BYTE_OFFSET + b as u32
}

pub fn is_special(id: u32) -> bool {
    id < BYTE_OFFSET
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pieces: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    split_digits: bool,
}

impl Vocab {
    /// Specials and byte pieces only.
    pub fn bytes_only(split_digits: bool) -> Self {
        let mut pieces: Vec<Vec<u8>> = SPECIAL_PIECES.iter().map(|s| s.as_bytes().to_vec()).collect();
        pieces.extend((0..=255u8).map(|b| vec![b]));
        Self { pieces, merges: Vec::new(), ranks: HashMap::new(), split_digits }
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let id = self.pieces.len() as u32;
        let mut piece = self.pieces[left as usize].clone();
        piece.extend_from_slice(&self.pieces[right as usize]);
        self.pieces.push(piece);
        self.merges.push((left, right));
        self.ranks.insert((left, right), id);
        id
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn split_digits(&self) -> bool {
        self.split_digits
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    /// Encodes bytes; with `add_specials` the result is wrapped in BOS … EOS.
    pub fn encode(&self, text: &[u8], add_specials: bool) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() + 2);
        if add_specials {
            out.push(BOS);
        }
        for (i, segment) in text.split(|&b| b == b'\n').enumerate() {
            if i > 0 {
                out.push(byte_id(b'\n'));
            }
            out.extend(self.encode_segment(segment));
        }
        if add_specials {
            out.push(EOS);
        }
        out
    }

    /// Applies merges in learned order: repeatedly merge every occurrence of
    /// the lowest-ranked adjacent pair.
    fn encode_segment(&self, bytes: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| byte_id(b)).collect();
        if self.merges.is_empty() {
            return ids;
        }
        loop {
            let best = ids.windows(2).filter_map(|w| self.ranks.get(&(w[0], w[1])).copied()).min();
            let Some(merged) = best else { break };
            let (l, r) = self.merges[(merged - FIRST_MERGE) as usize];
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            ids = next;
        }
        ids
    }

    pub fn decode(&self, ids: &[u32], strip_specials: bool) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if strip_specials && is_special(id) {
                continue;
            }
            let piece = self.piece(id).ok_or_else(|| Error::Input(format!("unknown token id {id}")))?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self.file()).expect("vocab serializes")
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        Self::from_file(serde_json::from_value(value)?)
    }

    fn file(&self) -> VocabFile {
        VocabFile {
            version: FORMAT_VERSION,
            vocab_size: self.len(),
            split_digits: self.split_digits,
            specials: Specials { pad: PAD, bos: BOS, eos: EOS },
            pieces: self.pieces.iter().enumerate().map(|(i, p)| (i as u32, hex::encode(p))).collect(),
            merges: self.merges.clone(),
        }
    }

    fn from_file(file: VocabFile) -> Result<Self> {
        if file.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported vocab version {}", file.version)));
        }
        if (file.specials.pad, file.specials.bos, file.specials.eos) != (PAD, BOS, EOS) {
            return Err(Error::Format("special ids must be pad=0, bos=1, eos=2".into()));
        }
        let mut vocab = Self::bytes_only(file.split_digits);
        for (n, &(l, r)) in file.merges.iter().enumerate() {
            let next = vocab.len() as u32;
            if l >= next || r >= next || is_special(l) || is_special(r) {
                return Err(Error::Format(format!("merge {n} refers to an unknown piece")));
            }
            vocab.push_merge(l, r);
        }
        if file.vocab_size != vocab.len() || file.pieces.len() != vocab.len() {
            return Err(Error::Format(format!(
                "vocab_size {} and {} pieces disagree with {} pieces implied by the merges",
                file.vocab_size,
                file.pieces.len(),
                vocab.len()
            )));
        }
        for (&id, hexed) in &file.pieces {
            let bytes = hex::decode(hexed).map_err(|e| Error::Format(format!("piece {id}: {e}")))?;
            if vocab.piece(id) != Some(bytes.as_slice()) {
                return Err(Error::Format(format!("piece {id} does not match its merge")));
            }
        }
        Ok(vocab)
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
#[serde(deny_unknown_fields)]
struct Specials {
    pad: u32,
    bos: u32,
    eos: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    version: u32,
    vocab_size: usize,
    split_digits: bool,
    specials: Specials,
    pieces: BTreeMap<u32, String>,
    merges: Vec<(u32, u32)>,
}

/// Heap entry: highest count first, then the lexicographically smallest
/// `(left bytes, right bytes)`.
#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    key: Reverse<(Vec<u8>, Vec<u8>)>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| self.key.cmp(&other.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn has_digit(piece: &[u8]) -> bool {
    piece.iter().any(u8::is_ascii_digit)
}

/// Learns merges from `corpus` until the vocabulary holds `vocab_size`
/// pieces or no eligible pair occurs twice.
pub fn train_bpe(corpus: &[u8], vocab_size: usize, split_digits: bool) -> Result<Vocab> {
    if vocab_size <= FIRST_MERGE as usize {
        return Err(Error::Config(format!(
            "vocab_size must exceed {FIRST_MERGE} (3 specials + 256 byte pieces), got {vocab_size}"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Input("tokenizer corpus is empty".into()));
    }
    let mut vocab = Vocab::bytes_only(split_digits);

    let mut line_counts: HashMap<&[u8], i64> = HashMap::new();
    for line in corpus.split(|&b| b == b'\n').filter(|l| l.len() > 1) {
        *line_counts.entry(line).or_default() += 1;
    }
    let mut lines: Vec<(&[u8], i64)> = line_counts.into_iter().collect();
    lines.sort_unstable();
    let mut words: Vec<(Vec<u32>, i64)> =
        lines.into_iter().map(|(l, c)| (l.iter().map(|&b| byte_id(b)).collect(), c)).collect();

    let eligible = |v: &Vocab, (l, r): (u32, u32)| {
        !v.split_digits || !(has_digit(&v.pieces[l as usize]) || has_digit(&v.pieces[r as usize]))
    };
    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (w, (ids, c)) in words.iter().enumerate() {
        for p in ids.windows(2).map(|p| (p[0], p[1])) {
            if eligible(&vocab, p) {
                *counts.entry(p).or_default() += c;
                where_.entry(p).or_default().insert(w);
            }
        }
    }
    let candidate = |v: &Vocab, pair: (u32, u32), count: i64| Candidate {
        count,
        key: Reverse((v.pieces[pair.0 as usize].clone(), v.pieces[pair.1 as usize].clone())),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = counts.iter().map(|(&p, &c)| candidate(&vocab, p, c)).collect();

    while vocab.len() < vocab_size {
        let Some(top) = heap.pop() else { break };
        let current = counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count {
            // Stale entry; the live count was pushed when it changed.
            continue;
        }
        if current < 2 {
            break;
        }
        let (l, r) = top.pair;
        let merged = vocab.push_merge(l, r);
        let mut affected: Vec<usize> = where_.remove(&top.pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for w in affected {
            let (ids, c) = &mut words[w];
            for p in ids.windows(2).map(|p| (p[0], p[1])) {
                if let Some(n) = counts.get_mut(&p) {
                    *n -= *c;
                    touched.insert(p);
                }
            }
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            *ids = next;
            for p in ids.windows(2).map(|p| (p[0], p[1])) {
                if eligible(&vocab, p) {
                    *counts.entry(p).or_default() += *c;
                    where_.entry(p).or_default().insert(w);
                    touched.insert(p);
                }
            }
        }
        counts.remove(&top.pair);
        let mut touched: Vec<(u32, u32)> = touched.into_iter().collect();
        touched.sort_unstable();
        for p in touched {
            match counts.get(&p) {
                Some(&c) if c > 0 => heap.push(candidate(&vocab, p, c)),
                _ => {
                    counts.remove(&p);
                }
            }
        }
    }
    Ok(vocab)
}
