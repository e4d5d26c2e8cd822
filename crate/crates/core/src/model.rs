//! The TreeCoder model: shared embeddings and output head around a complete
//! k-ary tree of decoder nodes with a selector at every internal node.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, default_ffn_hidden, BlockSpec, EmbeddingParams, LayerParams, NORM_EPS};
use crate::params::{ParamId, ParamSet, Session};
use crate::selector::{self, SelectorParams};
use crate::tree;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    #[default]
    Learned,
    Random,
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown routing mode {other:?} (expected learned or random)"))),
        }
    }
}

/// Architecture of a TreeCoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    /// Branching factor.
    pub k: usize,
    /// Height in edges.
    pub h: usize,
    /// Decoder layers per node.
    pub dec: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    /// Selector hidden width as a multiple of `d_model`.
    pub selector_hidden_mult: usize,
    pub dropout: f64,
    pub routing: RoutingMode,
    pub norm_eps: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            k: 2,
            h: 1,
            dec: 1,
            d_model: 1024,
            n_heads: 16,
            ffn_hidden: default_ffn_hidden(1024),
            context_len: 128,
            vocab_size: 8000,
            selector_hidden_mult: 8,
            dropout: 0.1,
            routing: RoutingMode::Learned,
            norm_eps: NORM_EPS,
        }
    }
}

impl TreeConfig {
    /// Defaults at the given tree shape and width, with the FFN width and
    /// head count derived from `d_model`.
    pub fn with_shape(k: usize, h: usize, dec: usize, d_model: usize) -> Self {
        Self {
            k,
            h,
            dec,
            d_model,
            n_heads: (d_model / 64).max(1),
            ffn_hidden: default_ffn_hidden(d_model),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("dec", self.dec),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("context_len", self.context_len),
            ("vocab_size", self.vocab_size),
            ("selector_hidden_mult", self.selector_hidden_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        let too_big = (self.k as f64).powi(self.h as i32 + 1) > 1e7;
        if too_big {
            return Err(Error::Config(format!("tree (k={}, h={}) is too large", self.k, self.h)));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        tree::node_count(self.k, self.h)
    }

    pub fn selector_count(&self) -> usize {
        tree::internal_count(self.k, self.h)
    }

    pub fn selector_hidden(&self) -> usize {
        self.selector_hidden_mult * self.d_model
    }

    pub fn path_length(&self) -> usize {
        tree::path_length(self.h, self.dec)
    }

    pub fn block_spec(&self) -> BlockSpec {
        BlockSpec { n_heads: self.n_heads, dropout: self.dropout, norm_eps: self.norm_eps }
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Structure {
    embeddings: EmbeddingParams,
    nodes: Vec<Vec<LayerParams>>,
    selectors: Vec<SelectorParams>,
}

/// Declares every parameter in manifest order: token table, positions, each
/// node's layers, each selector, final norm, head.
fn layout(config: &TreeConfig, sink: &mut dyn FnMut(ParamSpec) -> ParamId) -> Structure {
    let (d, f, v, l) = (config.d_model, config.ffn_hidden, config.vocab_size, config.context_len);
    let m = config.selector_hidden();
    let residual_std = INIT_STD / (2.0 * config.path_length() as f64).sqrt();
    let mut add = |name: String, shape: Vec<usize>, decay: bool, init: Init| sink(ParamSpec { name, shape, decay, init });

    let token = add("embed.token".into(), vec![v, d], false, Init::Normal(INIT_STD));
    let position = add("embed.position".into(), vec![l, d], false, Init::Normal(INIT_STD));
    let nodes = (0..config.node_count())
        .map(|n| {
            (0..config.dec)
                .map(|j| {
                    let p = format!("node{n}.layer{j}");
                    let normal = Init::Normal(INIT_STD);
                    LayerParams {
                        wq: add(format!("{p}.wq"), vec![d, d], true, normal),
                        wk: add(format!("{p}.wk"), vec![d, d], true, normal),
                        wv: add(format!("{p}.wv"), vec![d, d], true, normal),
                        wo: add(format!("{p}.wo"), vec![d, d], true, Init::Normal(residual_std)),
                        w_gate: add(format!("{p}.w_gate"), vec![d, f], true, normal),
                        w_up: add(format!("{p}.w_up"), vec![d, f], true, normal),
                        w_down: add(format!("{p}.w_down"), vec![f, d], true, Init::Normal(residual_std)),
                        norm1: add(format!("{p}.norm1"), vec![d], false, Init::Ones),
                        norm2: add(format!("{p}.norm2"), vec![d], false, Init::Ones),
                    }
                })
                .collect()
        })
        .collect();
    let selectors = (0..config.selector_count())
        .map(|s| SelectorParams {
            w_gate: add(format!("selector{s}.w_gate"), vec![d, m], true, Init::Normal(INIT_STD)),
            w_up: add(format!("selector{s}.w_up"), vec![d, m], true, Init::Normal(INIT_STD)),
            w_out: add(format!("selector{s}.w_out"), vec![m, config.k], true, Init::Normal(INIT_STD)),
        })
        .collect();
    let final_norm = add("final_norm".into(), vec![d], false, Init::Ones);
    let head = add("head".into(), vec![d, v], true, Init::Normal(INIT_STD));
    Structure { embeddings: EmbeddingParams { token, position, final_norm, head }, nodes, selectors }
}

/// Every parameter a model of this configuration would hold, without
/// allocating any of them.
pub fn manifest(config: &TreeConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    layout(config, &mut |s| {
        specs.push(s);
        ParamId(specs.len() - 1)
    });
    specs
}

/// Root-to-leaf path taken by one sequence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RouteRecord {
    pub node_indices: Vec<usize>,
    pub child_choices: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
    pub grad_tricks: Vec<f64>,
}

impl RouteRecord {
    pub fn leaf(&self) -> usize {
        *self.node_indices.last().unwrap_or(&0)
    }
}

pub struct ForwardOutput {
    /// `[B×L×V]`, rows in input order.
    pub logits: Var,
    pub routes: Vec<RouteRecord>,
    /// Sum over sequences of node evaluations.
    pub node_evals: usize,
    /// Sum over sequences of learned-selector evaluations.
    pub selector_evals: usize,
    /// Grad-trick arrays, one per (node, level) group that was routed.
    pub grad_tricks: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeCoderModel<T> {
    pub config: TreeConfig,
    pub params: ParamSet<T>,
    pub embeddings: EmbeddingParams,
    pub nodes: Vec<Vec<LayerParams>>,
    pub selectors: Vec<SelectorParams>,
}

struct Group {
    node: usize,
    rows: Vec<usize>,
    x: Var,
}

impl<T: Scalar> TreeCoderModel<T> {
    /// Initializes every parameter from `seed`.
    pub fn build(config: TreeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let structure = layout(&config, &mut |spec| {
            let data: Vec<T> = match spec.init {
                Init::Ones => vec![T::one(); spec.numel()],
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("finite std");
                    (0..spec.numel()).map(|_| T::cast(normal.sample(&mut rng))).collect()
                }
            };
            params.push(spec.name, Tensor { shape: spec.shape, data }, spec.decay)
        });
        Ok(Self {
            config,
            params,
            embeddings: structure.embeddings,
            nodes: structure.nodes,
            selectors: structure.selectors,
        })
    }

    /// Builds a model from an existing parameter set laid out in manifest order.
    pub fn from_params(config: TreeConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let specs = manifest(&config);
        if specs.len() != params.len() {
            return Err(Error::Format(format!("expected {} parameters, got {}", specs.len(), params.len())));
        }
        for (spec, p) in specs.iter().zip(params.iter()) {
            if spec.name != p.name || spec.shape != p.value.shape {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name, p.value.shape, spec.name, spec.shape
                )));
            }
        }
        let mut next = 0;
        let structure = layout(&config, &mut |_| {
            next += 1;
            ParamId(next - 1)
        });
        Ok(Self {
            config,
            params,
            embeddings: structure.embeddings,
            nodes: structure.nodes,
            selectors: structure.selectors,
        })
    }

    /// Same parameter values at another element precision.
    pub fn cast<U: Scalar>(&self) -> TreeCoderModel<U> {
        let mut params = ParamSet::new();
        for p in self.params.iter() {
            let data = p.value.data.iter().map(|v| U::cast(v.as_f64())).collect();
            params.push(p.name.clone(), Tensor { shape: p.value.shape.clone(), data }, p.decay);
        }
        TreeCoderModel {
            config: self.config.clone(),
            params,
            embeddings: self.embeddings,
            nodes: self.nodes.clone(),
            selectors: self.selectors.clone(),
        }
    }

    /// Every parameter belonging to node `node`.
    pub fn node_param_ids(&self, node: usize) -> Vec<ParamId> {
        self.nodes[node].iter().flat_map(|l| l.ids()).collect()
    }

    pub fn selector_param_ids(&self, selector: usize) -> Vec<ParamId> {
        self.selectors[selector].ids().to_vec()
    }

    fn run_node(&self, s: &Session<'_, T>, node: usize, mut x: Var, train: bool, rng: &mut dyn RngCore) -> Result<Var> {
        let spec = self.config.block_spec();
        for layer in &self.nodes[node] {
            x = nn::decoder_layer(s.tape(), x, &layer.bind(s), &spec, train, rng)?;
        }
        Ok(x)
    }

    /// Routes every sequence of `tokens: [B×L]` from the root to a leaf and
    /// returns next-token logits. Sequences are grouped by their current
    /// node at each level; the result equals running each sequence alone.
    pub fn forward(
        &self,
        s: &Session<'_, T>,
        tokens: &[u32],
        pad_mask: &[bool],
        batch: usize,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput> {
        if !std::ptr::eq(s.params(), &self.params) {
            return Err(Error::Input("session is bound to a different parameter set".into()));
        }
        if pad_mask.len() != tokens.len() {
            return Err(Error::Input(format!("{} tokens but {} mask entries", tokens.len(), pad_mask.len())));
        }
        let tape = s.tape();
        let cfg = &self.config;
        let emb = self.embeddings.bind(s);
        let x0 = nn::embed(tape, tokens, batch, &emb, cfg.dropout, train, rng)?;
        let seq_len = tokens.len() / batch;

        let mut routes: Vec<RouteRecord> =
            (0..batch).map(|_| RouteRecord { node_indices: vec![0], ..Default::default() }).collect();
        let mut groups = vec![Group { node: 0, rows: (0..batch).collect(), x: x0 }];
        let mut out = ForwardOutput { logits: x0, routes: Vec::new(), node_evals: 0, selector_evals: 0, grad_tricks: vec![] };

        for _level in 0..cfg.h {
            let mut next = Vec::new();
            for g in groups {
                let n = g.rows.len();
                let y = self.run_node(s, g.node, g.x, train, rng)?;
                out.node_evals += n;

                let (choices, routed) = if cfg.k == 1 {
                    for &r in &g.rows {
                        routes[r].child_choices.push(0);
                        routes[r].probabilities.push(vec![1.0]);
                        routes[r].grad_tricks.push(1.0);
                    }
                    (vec![0; n], y)
                } else {
                    match cfg.routing {
                        RoutingMode::Learned => {
                            let mask: Vec<bool> =
                                g.rows.iter().flat_map(|&r| &pad_mask[r * seq_len..(r + 1) * seq_len]).copied().collect();
                            let pooled = selector::mean_pool(tape, y, &mask)?;
                            let sel = selector::select(tape, pooled, &self.selectors[g.node].bind(s))?;
                            out.selector_evals += n;
                            out.grad_tricks.push(sel.grad_trick);
                            let trick = tape.reshape(sel.grad_trick, &[n, 1, 1])?;
                            let routed = tape.mul(y, trick)?;
                            let mut choices = Vec::with_capacity(n);
                            for (&r, d) in g.rows.iter().zip(sel.decisions) {
                                choices.push(d.child_index);
                                routes[r].child_choices.push(d.child_index);
                                routes[r].probabilities.push(d.probabilities);
                                routes[r].grad_tricks.push(d.grad_trick);
                            }
                            (choices, routed)
                        }
                        RoutingMode::Random => {
                            let mut choices = Vec::with_capacity(n);
                            for &r in &g.rows {
                                let d = selector::select_random(cfg.k, rng)?;
                                choices.push(d.child_index);
                                routes[r].child_choices.push(d.child_index);
                                routes[r].probabilities.push(d.probabilities);
                                routes[r].grad_tricks.push(d.grad_trick);
                            }
                            (choices, y)
                        }
                    }
                };

                for c in 0..cfg.k {
                    let local: Vec<usize> = (0..n).filter(|&i| choices[i] == c).collect();
                    if local.is_empty() {
                        continue;
                    }
                    let child = tree::child(cfg.k, g.node, c);
                    let rows: Vec<usize> = local.iter().map(|&i| g.rows[i]).collect();
                    for &r in &rows {
                        routes[r].node_indices.push(child);
                    }
                    let x = if local.len() == n { routed } else { tape.gather_rows(routed, &local)? };
                    next.push(Group { node: child, rows, x });
                }
            }
            groups = next;
        }

        let mut parts = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(batch);
        for g in groups {
            let y = self.run_node(s, g.node, g.x, train, rng)?;
            out.node_evals += g.rows.len();
            parts.push(nn::output_head(tape, y, &emb, cfg.norm_eps)?);
            order.extend(g.rows);
        }
        out.logits = if parts.len() == 1 && order.iter().enumerate().all(|(i, &r)| i == r) {
            parts[0]
        } else {
            let stacked = tape.concat_rows(&parts)?;
            let mut position = vec![0; batch];
            for (p, &r) in order.iter().enumerate() {
                position[r] = p;
            }
            tape.gather_rows(stacked, &position)?
        };
        out.routes = routes;
        Ok(out)
    }
}
