mod common;

use common::two_language_corpus;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treecoder::checkpoint;
use treecoder::nn::NORM_EPS;
use treecoder::train::{evaluate, fit, FitOutput, TrainConfig};
use treecoder::{train_bpe, Error, PackedDataset, RoutingMode, TreeCoderModel, TreeConfig};

fn small(vocab: usize, context: usize, routing: RoutingMode) -> TreeConfig {
    TreeConfig {
        k: 2,
        h: 1,
        dec: 1,
        d_model: 32,
        n_heads: 2,
        ffn_hidden: 64,
        context_len: context,
        vocab_size: vocab,
        selector_hidden_mult: 2,
        dropout: 0.1,
        routing,
        norm_eps: NORM_EPS,
    }
}

fn quick(max_steps: usize) -> TrainConfig {
    TrainConfig { base_lr: 3e-3, warmup_steps: 10, max_steps: Some(max_steps), epochs: 1000, ..Default::default() }
}

fn text_data() -> (PackedDataset, PackedDataset, usize) {
    let vocab = train_bpe(two_language_corpus(200, 40, 1, 2).as_bytes(), 280, false).unwrap();
    let train = PackedDataset::from_texts(&[two_language_corpus(120, 40, 1, 3).as_bytes()], &vocab, 16).unwrap();
    let valid = PackedDataset::from_texts(&[two_language_corpus(30, 40, 1, 4).as_bytes()], &vocab, 16).unwrap();
    (train, valid, vocab.len())
}

#[test]
fn memorizes_a_small_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stream: Vec<u32> = (0..32 * 16).map(|_| rng.gen_range(3..40)).collect();
    let data = PackedDataset::from_stream(&stream, 16).unwrap();
    assert_eq!(data.len(), 32);
    let mut cfg = small(40, 16, RoutingMode::Learned);
    cfg.dropout = 0.0;
    let mut model = TreeCoderModel::<f32>::build(cfg, 1).unwrap();
    let tc = TrainConfig { base_lr: 1e-2, warmup_steps: 10, max_steps: Some(200), epochs: 1000, ..Default::default() };
    let r = fit(&mut model, &data, &data, &tc, FitOutput::default()).unwrap();
    assert_eq!(r.steps, 200);
    let first = r.train_losses[0];
    let last = r.train_losses.iter().rev().take(5).sum::<f64>() / 5.0;
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn fixed_seed_gives_identical_loss_traces() {
    let (train, valid, v) = text_data();
    let run = || {
        let mut model = TreeCoderModel::<f32>::build(small(v, 16, RoutingMode::Learned), 42).unwrap();
        fit(&mut model, &train, &valid, &quick(100), FitOutput::default()).unwrap().train_losses
    };
    let a = run();
    assert_eq!(a.len(), 100);
    assert_eq!(a, run());
}

#[test]
fn checkpoints_only_on_improvement() {
    let (train, valid, v) = text_data();
    let dir = tempfile::tempdir().unwrap();
    let mut metrics = Vec::new();
    let mut model = TreeCoderModel::<f32>::build(small(v, 16, RoutingMode::Learned), 3).unwrap();
    let tc = TrainConfig { epochs: 4, base_lr: 3e-3, warmup_steps: 5, ..Default::default() };
    let r = fit(
        &mut model,
        &train,
        &valid,
        &tc,
        FitOutput { checkpoint_dir: Some(dir.path().to_path_buf()), metrics: Some(&mut metrics), vocab: None },
    )
    .unwrap();
    assert_eq!(r.epochs, 4);
    assert!(!r.checkpoints.is_empty() && r.checkpoints.len() <= r.epochs);
    let best = r.val_ppl.iter().cloned().fold(f64::INFINITY, f64::min);
    let last = checkpoint::load(r.checkpoints.last().unwrap()).unwrap();
    assert_eq!(last.best_val_ppl, Some(best));
    assert_eq!(r.best_val_ppl, best);
    // The saved parameters reproduce the recorded perplexity.
    let again = evaluate(&last.model, &valid, 16).unwrap().ppl;
    assert!((again - best).abs() <= 1e-5 * best);

    let lines: Vec<serde_json::Value> =
        String::from_utf8(metrics).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), r.records.len());
    assert_eq!(lines.iter().filter(|l| l["split"] == "valid").count(), 4);
    for key in ["step", "epoch", "split", "loss", "ppl", "lr", "grad_norm", "leaf_hist"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }
}

#[test]
fn random_routing_never_touches_selectors() {
    let (train, valid, v) = text_data();
    for routing in [RoutingMode::Random, RoutingMode::Learned] {
        let mut model = TreeCoderModel::<f32>::build(small(v, 16, routing), 9).unwrap();
        let before = model.clone();
        fit(&mut model, &train, &valid, &quick(30), FitOutput::default()).unwrap();
        let ids = model.selector_param_ids(0);
        let unchanged = ids.iter().all(|&id| model.params.get(id).value == before.params.get(id).value);
        assert_eq!(unchanged, routing == RoutingMode::Random, "{routing:?}");
        let root = model.node_param_ids(0);
        assert!(root.iter().any(|&id| model.params.get(id).value != before.params.get(id).value));
    }
}

#[test]
fn evaluation_ignores_batch_size_and_order() {
    let (_, valid, v) = text_data();
    let model = TreeCoderModel::<f32>::build(small(v, 16, RoutingMode::Learned), 4).unwrap();
    let base = evaluate(&model, &valid, 16).unwrap();
    for bs in [1, 3, 7, 64] {
        let r = evaluate(&model, &valid, bs).unwrap();
        assert!((r.ppl - base.ppl).abs() <= 1e-6 * base.ppl, "batch {bs}");
        assert_eq!(r.routes.leaf_histogram, base.routes.leaf_histogram);
    }
    let mut rows: Vec<usize> = (0..valid.len()).collect();
    rows.reverse();
    let b = valid.batch(&rows);
    let reversed = PackedDataset {
        sequences: b.inputs.clone(),
        targets: b.targets.iter().map(|&t| t as u32).collect(),
        pad_mask: b.pad_mask.clone(),
        context_len: valid.context_len,
    };
    let r = evaluate(&model, &reversed, 16).unwrap();
    assert!((r.ppl - base.ppl).abs() <= 1e-6 * base.ppl);
    assert_eq!(r.tokens, base.tokens);
}

#[test]
fn divergence_reports_the_last_healthy_step() {
    let (train, valid, v) = text_data();
    let mut model = TreeCoderModel::<f32>::build(small(v, 16, RoutingMode::Learned), 4).unwrap();
    fit(&mut model, &train, &valid, &quick(3), FitOutput::default()).unwrap();
    let head = model.embeddings.head;
    model.params.get_mut(head).value.data[0] = f32::NAN;
    let err = fit(&mut model, &train, &valid, &quick(3), FitOutput::default()).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 1, last_healthy: None, .. }), "{err}");
    assert!(err.to_string().contains("last healthy"));
}
