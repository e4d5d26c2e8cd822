//! Parameter accounting and routing statistics.

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::model::{manifest, RouteRecord, TreeCoderModel, TreeConfig};
use crate::tree;

/// Exact parameter counts by component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub node_count: usize,
    pub selector_count: usize,
    /// Token and positional tables.
    pub embedding: usize,
    pub per_node: usize,
    pub nodes_total: usize,
    pub per_selector: usize,
    pub selectors_total: usize,
    /// Final norm and output projection.
    pub head: usize,
    pub total: usize,
    /// Share of all parameters held by selectors, in percent.
    pub selector_percent: f64,
    /// Parameters a single sequence touches: embeddings, head, `h+1` nodes, `h` selectors.
    pub active: usize,
    pub active_percent: f64,
}

impl ParamReport {
    fn from_counts<'a>(config: &TreeConfig, entries: impl Iterator<Item = (&'a str, usize)>) -> Self {
        let (mut embedding, mut nodes_total, mut selectors_total, mut head) = (0, 0, 0, 0);
        for (name, n) in entries {
            if name.starts_with("embed.") {
                embedding += n;
            } else if name.starts_with("node") {
                nodes_total += n;
            } else if name.starts_with("selector") {
                selectors_total += n;
            } else {
                head += n;
            }
        }
        let node_count = config.node_count();
        let selector_count = config.selector_count();
        let per_node = nodes_total / node_count;
        let per_selector = selectors_total.checked_div(selector_count).unwrap_or(0);
        let total = embedding + nodes_total + selectors_total + head;
        let selectors_on_path = if selector_count == 0 { 0 } else { config.h };
        let active = embedding + head + (config.h + 1) * per_node + selectors_on_path * per_selector;
        Self {
            node_count,
            selector_count,
            embedding,
            per_node,
            nodes_total,
            per_selector,
            selectors_total,
            head,
            total,
            selector_percent: 100.0 * selectors_total as f64 / total as f64,
            active,
            active_percent: 100.0 * active as f64 / total as f64,
        }
    }

    /// Counts from the configuration alone; nothing is allocated.
    pub fn for_config(config: &TreeConfig) -> Self {
        let specs = manifest(config);
        Self::from_counts(config, specs.iter().map(|s| (s.name.as_str(), s.numel())))
    }

    /// Counts by enumerating a built model's parameters.
    pub fn for_model<T: Scalar>(model: &TreeCoderModel<T>) -> Self {
        Self::from_counts(&model.config, model.params.iter().map(|p| (p.name.as_str(), p.value.len())))
    }
}

/// Where sequences ended up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteStats {
    /// Sequences per leaf, indexed from the first leaf.
    pub leaf_histogram: Vec<usize>,
    /// Entropy in bits of the node distribution at each depth `1..=h`.
    pub level_entropy_bits: Vec<f64>,
    /// Distinct leaves reached.
    pub distinct_paths: usize,
    pub sequences: usize,
}

impl RouteStats {
    pub fn from_routes(config: &TreeConfig, routes: &[RouteRecord]) -> Self {
        let (k, h) = (config.k, config.h);
        let first_leaf = tree::first_leaf(k, h);
        let leaves = if k == 1 { 1 } else { tree::leaf_count(k, h) };
        let mut leaf_histogram = vec![0; leaves];
        for r in routes {
            leaf_histogram[r.leaf() - first_leaf] += 1;
        }
        let level_entropy_bits = (1..=h)
            .map(|depth| {
                let width = k.pow(depth as u32);
                let start = tree::node_count(k, depth - 1);
                let start = if k == 1 { depth } else { start };
                let mut counts = vec![0usize; width.max(1)];
                for r in routes {
                    counts[r.node_indices[depth] - start] += 1;
                }
                entropy_bits(&counts)
            })
            .collect();
        Self {
            distinct_paths: leaf_histogram.iter().filter(|&&c| c > 0).count(),
            leaf_histogram,
            level_entropy_bits,
            sequences: routes.len(),
        }
    }

    /// Leaf frequencies summing to 1.
    pub fn leaf_fractions(&self) -> Vec<f64> {
        let n = self.sequences.max(1) as f64;
        self.leaf_histogram.iter().map(|&c| c as f64 / n).collect()
    }
}

pub fn entropy_bits(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RoutingMode;
    use crate::nn::NORM_EPS;

    fn full_size(h: usize, dec: usize) -> TreeConfig {
        TreeConfig { h, dec, ..TreeConfig::default() }
    }

    #[test]
    fn selector_total_matches_closed_form() {
        for (k, h, mult) in [(2, 1, 8), (3, 2, 16), (4, 3, 8)] {
            let c = TreeConfig { k, h, selector_hidden_mult: mult, d_model: 32, n_heads: 2, ..TreeConfig::default() };
            let r = ParamReport::for_config(&c);
            let m = mult * c.d_model;
            assert_eq!(r.selectors_total, tree::internal_count(k, h) * (2 * c.d_model * m + m * k));
        }
    }

    #[test]
    fn report_parts_sum_to_total() {
        let r = ParamReport::for_config(&full_size(3, 2));
        assert_eq!(r.embedding + r.nodes_total + r.selectors_total + r.head, r.total);
        assert_eq!(r.nodes_total, r.per_node * r.node_count);
        let d = 1024;
        assert_eq!(r.embedding, 8000 * d + 128 * d);
        assert_eq!(r.head, d * 8000 + d);
        assert_eq!(r.per_node, 2 * (4 * d * d + 3 * d * 2752 + 2 * d));
    }

    #[test]
    fn model_and_config_reports_agree() {
        let c = TreeConfig {
            k: 3,
            h: 2,
            dec: 2,
            d_model: 8,
            n_heads: 2,
            ffn_hidden: 32,
            context_len: 4,
            vocab_size: 13,
            selector_hidden_mult: 2,
            dropout: 0.0,
            routing: RoutingMode::Learned,
            norm_eps: NORM_EPS,
        };
        let m = TreeCoderModel::<f32>::build(c.clone(), 0).unwrap();
        assert_eq!(ParamReport::for_model(&m), ParamReport::for_config(&c));
        assert_eq!(ParamReport::for_model(&m).total, m.params.element_count());
    }

    #[test]
    fn forced_single_path_has_zero_entropy() {
        let c = TreeConfig { k: 2, h: 2, ..TreeConfig::default() };
        let routes: Vec<RouteRecord> = (0..10)
            .map(|_| RouteRecord { node_indices: vec![0, 2, 5], child_choices: vec![1, 0], ..Default::default() })
            .collect();
        let s = RouteStats::from_routes(&c, &routes);
        assert_eq!(s.leaf_histogram, vec![0, 0, 10, 0]);
        assert_eq!(s.level_entropy_bits, vec![0.0, 0.0]);
        assert_eq!(s.distinct_paths, 1);
    }

    #[test]
    fn entropy_of_uniform_split() {
        assert!((entropy_bits(&[5, 5]) - 1.0).abs() < 1e-12);
        assert!((entropy_bits(&[1, 1, 1, 1]) - 2.0).abs() < 1e-12);
        assert_eq!(entropy_bits(&[0, 7]), 0.0);
    }
}
