//! Complete k-ary tree combinatorics.
//!
//! Height counts edges: a root-to-leaf path holds `h + 1` nodes. Nodes are
//! stored breadth-first in an array, so the children of node `i` are
//! `k·i + 1 ..= k·i + k` and the leaves are the last `k^h` indices.

use std::collections::BTreeMap;
use std::ops::Range;

/// Total nodes in a complete k-ary tree of height `h`.
pub fn node_count(k: usize, h: usize) -> usize {
    if k == 1 {
        return h + 1;
    }
    (k.pow(h as u32 + 1) - 1) / (k - 1)
}

/// Nodes that own a selector. A chain (`k = 1`) routes without selectors.
pub fn internal_count(k: usize, h: usize) -> usize {
    if k == 1 {
        return 0;
    }
    (k.pow(h as u32) - 1) / (k - 1)
}

pub fn leaf_count(k: usize, h: usize) -> usize {
    k.pow(h as u32)
}

pub fn children(k: usize, node: usize) -> Range<usize> {
    k * node + 1..k * node + k + 1
}

pub fn child(k: usize, node: usize, choice: usize) -> usize {
    k * node + 1 + choice
}

/// Index of the first leaf.
pub fn first_leaf(k: usize, h: usize) -> usize {
    node_count(k, h) - leaf_count(k, h)
}

/// Percentage of (equal-sized) node parameters a single token passes
/// through: `100 · (h+1) / node_count`.
pub fn active_fraction(k: usize, h: usize) -> f64 {
    100.0 * (h + 1) as f64 / node_count(k, h) as f64
}

/// Rounds to one decimal for table display.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Number of decoder layers a token traverses: `(h+1)·dec`.
pub fn path_length(h: usize, dec: usize) -> usize {
    (h + 1) * dec
}

/// Groups every `(h, dec)` with `h ≤ max_h`, `dec ≤ max_dec` by path length.
/// Each group also holds its linear equivalent `(0, path_length)`. Groups
/// are sorted by height.
pub fn equivalence_groups(max_h: usize, max_dec: usize) -> BTreeMap<usize, Vec<(usize, usize)>> {
    group_by_path_length((0..=max_h).flat_map(|h| (1..=max_dec).map(move |dec| (h, dec))))
}

/// Groups the given `(h, dec)` cells by path length, adding the linear
/// equivalent `(0, path_length)` to every group.
pub fn group_by_path_length(cells: impl IntoIterator<Item = (usize, usize)>) -> BTreeMap<usize, Vec<(usize, usize)>> {
    let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (h, dec) in cells {
        groups.entry(path_length(h, dec)).or_default().push((h, dec));
    }
    for (&len, members) in groups.iter_mut() {
        members.push((0, len));
        members.sort_unstable();
        members.dedup();
    }
    groups
}
