//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use treecoder::checkpoint;
use treecoder::generate::generate as sample;
use treecoder::nn::default_ffn_hidden;
use treecoder::tokenizer::{BOS, FIRST_MERGE};
use treecoder::train::{evaluate, fit, EvalReport, FitOutput};
use treecoder::tree;
use treecoder::{train_bpe, PackedDataset, ParamReport, RoutingMode, TreeCoderModel, TreeConfig, Vocab};

use crate::config::ExperimentConfig;

fn read_corpus(paths: &[PathBuf]) -> Result<Vec<u8>> {
    let mut text = Vec::new();
    for p in paths {
        let bytes = fs::read(p).with_context(|| format!("cannot read corpus {}", p.display()))?;
        if !text.is_empty() && !text.ends_with(b"\n") {
            text.push(b'\n');
        }
        text.extend(bytes);
    }
    Ok(text)
}

pub fn tokenizer_train(corpus: &[PathBuf], vocab_size: usize, out: &Path, split_digits: bool) -> Result<()> {
    let text = read_corpus(corpus)?;
    let vocab = train_bpe(&text, vocab_size, split_digits)?;
    vocab.save(out).with_context(|| format!("cannot write {}", out.display()))?;

    let ids = vocab.encode(&text, false);
    let fallback = ids.iter().filter(|&&i| i < FIRST_MERGE).count();
    println!("pieces {} (3 specials, 256 bytes, {} merges)", vocab.len(), vocab.merges().len());
    println!("corpus bytes {} -> tokens {} ({:.3} bytes/token)", text.len(), ids.len(), text.len() as f64 / ids.len().max(1) as f64);
    println!("byte-piece share of tokens {:.1}%", 100.0 * fallback as f64 / ids.len().max(1) as f64);
    println!("coverage 100.0% (every byte has a piece)");
    Ok(())
}

fn pack(paths: &[PathBuf], vocab: &Vocab, context_len: usize, what: &str) -> Result<PackedDataset> {
    PackedDataset::load_and_pack(paths, vocab, context_len).with_context(|| format!("cannot load {what} data"))
}

fn route_rows(split: &str, report: &EvalReport, out: &mut String) {
    let fractions = report.routes.leaf_fractions();
    for (leaf, (&count, frac)) in report.routes.leaf_histogram.iter().zip(fractions).enumerate() {
        let _ = writeln!(out, "{split},{leaf},{count},{frac}");
    }
}

fn params_csv(r: &ParamReport) -> String {
    format!(
        "component,count\nembedding,{}\nper_node,{}\nnodes_total,{}\nper_selector,{}\nselectors_total,{}\nhead,{}\ntotal,{}\nactive,{}\nselector_percent,{}\nactive_percent,{}\n",
        r.embedding, r.per_node, r.nodes_total, r.per_selector, r.selectors_total, r.head, r.total, r.active,
        r.selector_percent, r.active_percent
    )
}

pub fn train(config_path: &Path, routing: Option<RoutingMode>, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(r) = routing {
        cfg.model.routing = r;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.check_inputs()?;
    let vocab = Vocab::load(&cfg.vocab).with_context(|| format!("cannot load vocab {}", cfg.vocab.display()))?;
    if !cfg.vocab_size_given {
        cfg.model.vocab_size = vocab.len();
    } else if cfg.model.vocab_size < vocab.len() {
        bail!("vocab_size {} is smaller than the vocabulary ({} pieces)", cfg.model.vocab_size, vocab.len());
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let context = cfg.model.context_len;
    let train_set = pack(&cfg.train_data, &vocab, context, "training")?;
    let valid_set = pack(&cfg.valid_data, &vocab, context, "validation")?;
    let test_set = if cfg.test_data.is_empty() { None } else { Some(pack(&cfg.test_data, &vocab, context, "test")?) };

    let ckpt_dir = cfg.out_dir.join("checkpoints");
    if ckpt_dir.is_dir() && fs::read_dir(&ckpt_dir)?.next().is_some() {
        bail!("{} already holds checkpoints; choose a fresh out_dir", ckpt_dir.display());
    }
    let mut model = TreeCoderModel::<f32>::build(cfg.model.clone(), cfg.train.seed)?;

    // Everything is validated; from here on outputs are written.
    let tables = cfg.out_dir.join("tables");
    fs::create_dir_all(&tables).with_context(|| format!("cannot create {}", tables.display()))?;
    let resolved = serde_json::json!({ "name": cfg.name, "model": cfg.model, "train": cfg.train });
    fs::write(cfg.out_dir.join("config.json"), serde_json::to_string_pretty(&resolved)?)?;

    let report = ParamReport::for_model(&model);
    log::info!(
        "{}: {} sequences train, {} valid; {} parameters ({} active per sequence)",
        cfg.name,
        train_set.len(),
        valid_set.len(),
        report.total,
        report.active
    );
    let initial = evaluate(&model, &valid_set, cfg.train.batch_size)?;
    println!("initial valid perplexity {}", initial.ppl);

    let mut metrics = BufWriter::new(fs::File::create(cfg.out_dir.join("metrics.jsonl"))?);
    let fitted = fit(
        &mut model,
        &train_set,
        &valid_set,
        &cfg.train,
        FitOutput { checkpoint_dir: Some(ckpt_dir), metrics: Some(&mut metrics), vocab: Some(&vocab) },
    )?;
    metrics.flush()?;

    let best = fitted.checkpoints.last().context("no checkpoint was written")?;
    let saved = checkpoint::load(best)?;
    let valid = evaluate(&saved.model, &valid_set, cfg.train.batch_size)?;
    let test = test_set.as_ref().map(|t| evaluate(&saved.model, t, cfg.train.batch_size)).transpose()?;

    let mut eval_csv = String::from("split,tokens,mean_nll,ppl\n");
    let mut routes_csv = String::from("split,leaf,count,fraction\n");
    let _ = writeln!(eval_csv, "initial_valid,{},{},{}", initial.tokens, initial.mean_nll(), initial.ppl);
    for (split, r) in [("valid", Some(&valid)), ("test", test.as_ref())] {
        if let Some(r) = r {
            let _ = writeln!(eval_csv, "{split},{},{},{}", r.tokens, r.mean_nll(), r.ppl);
            route_rows(split, r, &mut routes_csv);
        }
    }
    fs::write(tables.join("eval.csv"), eval_csv)?;
    fs::write(tables.join("routes.csv"), routes_csv)?;
    fs::write(tables.join("params.csv"), params_csv(&report))?;

    println!("steps {} epochs {} checkpoints {}", fitted.steps, fitted.epochs, fitted.checkpoints.len());
    println!("best checkpoint {}", best.display());
    println!("valid perplexity {}", valid.ppl);
    if let Some(t) = &test {
        println!("test perplexity {}", t.ppl);
    }
    println!("valid leaf histogram {:?}", valid.routes.leaf_histogram);
    Ok(())
}

fn checkpoint_and_vocab(path: &Path, vocab: Option<&Path>) -> Result<(checkpoint::Checkpoint, Vocab)> {
    let ckpt = checkpoint::load(path)?;
    let vocab = match (vocab, &ckpt.vocab) {
        (Some(p), _) => Vocab::load(p).with_context(|| format!("cannot load vocab {}", p.display()))?,
        (None, Some(v)) => v.clone(),
        (None, None) => bail!("checkpoint has no embedded vocabulary; pass --vocab"),
    };
    Ok((ckpt, vocab))
}

pub fn eval(path: &Path, data: &[PathBuf], vocab: Option<&Path>, batch_size: usize) -> Result<()> {
    let (ckpt, vocab) = checkpoint_and_vocab(path, vocab)?;
    let set = pack(data, &vocab, ckpt.model.config.context_len, "evaluation")?;
    let r = evaluate(&ckpt.model, &set, batch_size)?;
    println!("perplexity {}", r.ppl);
    println!("tokens {}", r.tokens);
    println!("leaf histogram {:?}", r.routes.leaf_histogram);
    println!("level entropy bits {:?}", r.routes.level_entropy_bits);
    Ok(())
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    h: usize,
    #[arg(long, default_value_t = 1)]
    dec: usize,
    #[arg(long, default_value_t = 1024)]
    d_model: usize,
    #[arg(long, default_value_t = 16)]
    n_heads: usize,
    /// Defaults to 8·d_model/3 rounded up to a multiple of 32.
    #[arg(long)]
    ffn_hidden: Option<usize>,
    #[arg(long, default_value_t = 8000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 128)]
    context_len: usize,
    #[arg(long, default_value_t = 8)]
    selector_mult: usize,
    /// Also write the tables as CSV under DIR/tables.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn pair_list(pairs: &[(usize, usize)]) -> String {
    pairs.iter().map(|(h, d)| format!("({h},{d})")).collect::<Vec<_>>().join(",")
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let config = TreeConfig {
        k: a.k,
        h: a.h,
        dec: a.dec,
        d_model: a.d_model,
        n_heads: a.n_heads,
        ffn_hidden: a.ffn_hidden.unwrap_or_else(|| default_ffn_hidden(a.d_model)),
        context_len: a.context_len,
        vocab_size: a.vocab_size,
        selector_hidden_mult: a.selector_mult,
        ..TreeConfig::default()
    };
    config.validate()?;
    let (k, h) = (a.k, a.h);
    let length = tree::path_length(h, a.dec);
    let groups = tree::equivalence_groups(h.max(5), a.dec.max(8));
    let r = ParamReport::for_config(&config);

    println!("tree k={k} h={h} dec={}", a.dec);
    println!("nodes {}", tree::node_count(k, h));
    println!("selectors {}", tree::internal_count(k, h));
    println!("leaves {}", if k == 1 { 1 } else { tree::leaf_count(k, h) });
    println!("active {:.1}%", tree::round1(tree::active_fraction(k, h)));
    println!("path length {length}");
    println!("group {length}: {}", pair_list(&groups[&length]));
    println!("parameters (d_model {}, ffn {}, vocab {}, context {}, selector mult {}):", a.d_model, config.ffn_hidden, a.vocab_size, a.context_len, a.selector_mult);
    println!("  embedding       {:>14}", r.embedding);
    println!("  per node        {:>14}", r.per_node);
    println!("  nodes total     {:>14}", r.nodes_total);
    println!("  per selector    {:>14}", r.per_selector);
    println!("  selectors total {:>14}  ({:.1}%)", r.selectors_total, tree::round1(r.selector_percent));
    println!("  head            {:>14}", r.head);
    println!("  total           {:>14}  ({:.1}M)", r.total, tree::round1(r.total as f64 / 1e6));
    println!("  active          {:>14}  ({:.1}%)", r.active, tree::round1(r.active_percent));

    let mut nodes_csv = String::from("k,h,nodes,active_percent\n");
    println!("\nnodes / active % by k (rows) and h (columns 1..5)");
    for kk in 1..=4 {
        let mut line = format!("k={kk}");
        for hh in 1..=5 {
            let (n, f) = (tree::node_count(kk, hh), tree::active_fraction(kk, hh));
            let _ = write!(line, "  {n:>5} / {:>5.1}", tree::round1(f));
            let _ = writeln!(nodes_csv, "{kk},{hh},{n},{f}");
        }
        println!("{line}");
    }

    if let Some(dir) = &a.out {
        let tables = dir.join("tables");
        fs::create_dir_all(&tables).with_context(|| format!("cannot create {}", tables.display()))?;
        let mut groups_csv = String::from("path_length,h,dec\n");
        for (len, members) in &groups {
            for (hh, d) in members {
                let _ = writeln!(groups_csv, "{len},{hh},{d}");
            }
        }
        fs::write(tables.join("tree.csv"), nodes_csv)?;
        fs::write(tables.join("groups.csv"), groups_csv)?;
        fs::write(tables.join("params.csv"), params_csv(&r))?;
    }
    Ok(())
}

pub fn generate(path: &Path, prompt: &str, max_tokens: usize, temperature: f64, seed: u64) -> Result<()> {
    let (ckpt, vocab) = checkpoint_and_vocab(path, None)?;
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(prompt.as_bytes(), false));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = sample(&ckpt.model, &ids, max_tokens, temperature, &mut rng)?;
    let text = vocab.decode(&g.tokens, true)?;
    println!("{prompt}{}", String::from_utf8_lossy(&text));
    for (i, route) in g.routes.iter().enumerate() {
        let token = g.tokens.get(i).map_or("<eos>".to_string(), |t| t.to_string());
        println!("step {i} token {token} route {:?}", route.node_indices);
    }
    Ok(())
}
