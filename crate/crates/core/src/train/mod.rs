//! Training loop, evaluation and optimizer state.

mod optim;
mod schedule;

use std::io::Write;
use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_gradients, grad_norm, AdamW, AdamWConfig};
pub use schedule::Schedule;

use crate::analysis::RouteStats;
use crate::autodiff::Scalar;
use crate::checkpoint;
use crate::data::{Batch, PackedDataset};
use crate::error::{Error, Result};
use crate::model::{RouteRecord, TreeCoderModel};
use crate::params::Session;
use crate::tokenizer::{Vocab, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// First cosine cycle length; one epoch of steps when unset.
    pub restart_period: Option<usize>,
    pub restart_mult: f64,
    pub min_lr_fraction: f64,
    pub seed: u64,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Training records are logged every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            warmup_steps: 2000,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            batch_size: 16,
            epochs: 20,
            restart_period: None,
            restart_mult: 1.0,
            min_lr_fraction: 0.1,
            seed: 42,
            max_steps: None,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.beta1 == 0.0 || self.beta2 == 0.0 {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if self.adam_eps <= 0.0 || self.clip_norm <= 0.0 || self.weight_decay < 0.0 {
            return bad("adam_eps and clip_norm must be positive, weight_decay non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.log_every == 0 || self.restart_period == Some(0) {
            return bad("batch_size, epochs, log_every and restart_period must be at least 1");
        }
        if self.restart_mult < 1.0 {
            return bad("restart_mult must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return bad("min_lr_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            period: self.restart_period.unwrap_or(steps_per_epoch.max(1)),
            restart_mult: self.restart_mult,
            min_lr_fraction: self.min_lr_fraction,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub ppl: f64,
    pub lr: Option<f64>,
    pub grad_norm: Option<f64>,
    pub leaf_hist: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub nll_sum: f64,
    pub tokens: usize,
    pub ppl: f64,
    pub routes: RouteStats,
}

impl EvalReport {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.tokens as f64
    }
}

/// Summed negative log-likelihood and scored count over `[N×V]` logits,
/// skipping `PAD` targets. Accumulates in `f64`.
pub fn nll_from_logits<T: Scalar>(logits: &[T], targets: &[usize], vocab: usize) -> (f64, usize) {
    let (mut sum, mut count) = (0.0, 0);
    for (row, &t) in logits.chunks(vocab).zip(targets) {
        if t == PAD as usize {
            continue;
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        sum += lse - row[t].as_f64();
        count += 1;
    }
    (sum, count)
}

/// Perplexity over the scored positions, routes included.
pub fn evaluate<T: Scalar>(model: &TreeCoderModel<T>, data: &PackedDataset, batch_size: usize) -> Result<EvalReport> {
    if data.target_count() == 0 {
        return Err(Error::Input("evaluation set has no scored tokens".into()));
    }
    let vocab = model.config.vocab_size;
    // Only random routing draws from it; the fixed seed keeps evaluation repeatable.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut nll_sum, mut tokens) = (0.0, 0);
    let mut routes = Vec::with_capacity(data.len());
    for batch in data.sequential(batch_size)? {
        let s = Session::new(&model.params);
        let out = model.forward(&s, &batch.inputs, &batch.pad_mask, batch.batch_size, false, &mut rng)?;
        let (sum, count) = s.tape().with_value(out.logits, |v| nll_from_logits(v, &batch.targets, vocab));
        nll_sum += sum;
        tokens += count;
        routes.extend(out.routes);
    }
    if !nll_sum.is_finite() {
        return Err(Error::Numeric("evaluation produced a non-finite loss".into()));
    }
    Ok(EvalReport { nll_sum, tokens, ppl: (nll_sum / tokens as f64).exp(), routes: RouteStats::from_routes(&model.config, &routes) })
}

pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub routes: Vec<RouteRecord>,
}

/// Forward, backward, clip and update on one batch.
pub fn train_step<T: Scalar>(
    model: &mut TreeCoderModel<T>,
    opt: &mut AdamW,
    batch: &Batch,
    lr: f64,
    clip_norm: f64,
    rng: &mut dyn RngCore,
) -> Result<StepStats> {
    let (loss, grads, routes) = {
        let s = Session::new(&model.params);
        let out = model.forward(&s, &batch.inputs, &batch.pad_mask, batch.batch_size, true, rng)?;
        let loss = s.tape().cross_entropy(out.logits, &batch.targets, PAD as usize)?;
        let value = s.tape().scalar(loss)?.as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {value}")));
        }
        s.tape().backward(loss)?;
        (value, s.grads(), out.routes)
    };
    let active: Vec<_> = grads.iter().map(|(id, _)| *id).collect();
    model.params.zero_grads();
    model.params.accumulate(grads);
    let grad_norm = clip_gradients(&mut model.params, clip_norm);
    opt.step(&mut model.params, &active, lr)?;
    Ok(StepStats { loss, grad_norm, routes })
}

/// Where `fit` writes its artifacts. Everything is optional.
#[derive(Default)]
pub struct FitOutput<'a> {
    /// Directory for `epoch-NNN.ckpt` files, written when validation improves.
    pub checkpoint_dir: Option<PathBuf>,
    /// Receives one JSON line per log record.
    pub metrics: Option<&'a mut dyn Write>,
    /// Embedded in every checkpoint.
    pub vocab: Option<&'a Vocab>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub steps: usize,
    pub epochs: usize,
    /// Training loss of every step.
    pub train_losses: Vec<f64>,
    /// Validation perplexity at the end of every epoch.
    pub val_ppl: Vec<f64>,
    pub best_val_ppl: f64,
    /// Checkpoints in the order written.
    pub checkpoints: Vec<PathBuf>,
    pub records: Vec<LogRecord>,
}

/// Trains with AdamW under the warmup/cosine schedule, validating after
/// every epoch and checkpointing whenever validation perplexity improves.
pub fn fit<T: Scalar>(
    model: &mut TreeCoderModel<T>,
    train: &PackedDataset,
    valid: &PackedDataset,
    cfg: &TrainConfig,
    mut output: FitOutput<'_>,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.target_count() == 0 {
        return Err(Error::Input("training set has no scored tokens".into()));
    }
    if let Some(dir) = &output.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(steps_per_epoch);
    let mut opt = AdamW::new(cfg.adamw(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);

    let mut report = FitReport {
        steps: 0,
        epochs: 0,
        train_losses: Vec::new(),
        val_ppl: Vec::new(),
        best_val_ppl: f64::INFINITY,
        checkpoints: Vec::new(),
        records: Vec::new(),
    };
    let mut emit = |report: &mut FitReport, record: LogRecord| -> Result<()> {
        if let Some(w) = output.metrics.as_mut() {
            serde_json::to_writer(&mut **w, &record)?;
            w.write_all(b"\n")?;
        }
        report.records.push(record);
        Ok(())
    };

    'epochs: for epoch in 0..cfg.epochs {
        for batch in train.batches(cfg.batch_size, cfg.seed, epoch as u64)? {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
            if batch.target_count == 0 {
                continue;
            }
            let step = report.steps + 1;
            let lr = schedule.lr_at(step);
            let last_healthy = (report.steps > 0).then_some(report.steps);
            let stats = train_step(model, &mut opt, &batch, lr, cfg.clip_norm, &mut rng).map_err(|e| match e {
                Error::Numeric(detail) => Error::Diverged { step, last_healthy, detail },
                other => other,
            })?;
            report.steps = step;
            report.train_losses.push(stats.loss);
            if step.is_multiple_of(cfg.log_every) {
                let hist = RouteStats::from_routes(&model.config, &stats.routes).leaf_histogram;
                log::debug!("step {step} loss {:.4} lr {lr:.3e} grad_norm {:.3}", stats.loss, stats.grad_norm);
                emit(
                    &mut report,
                    LogRecord {
                        step,
                        epoch,
                        split: "train".into(),
                        loss: stats.loss,
                        ppl: stats.loss.exp(),
                        lr: Some(lr),
                        grad_norm: Some(stats.grad_norm),
                        leaf_hist: hist,
                    },
                )?;
            }
        }
        report.epochs = epoch + 1;
        let eval = evaluate(model, valid, cfg.batch_size)?;
        log::info!("epoch {epoch} step {} valid ppl {:.4}", report.steps, eval.ppl);
        report.val_ppl.push(eval.ppl);
        let step = report.steps;
        emit(
            &mut report,
            LogRecord {
                step,
                epoch,
                split: "valid".into(),
                loss: eval.mean_nll(),
                ppl: eval.ppl,
                lr: None,
                grad_norm: None,
                leaf_hist: eval.routes.leaf_histogram.clone(),
            },
        )?;
        if eval.ppl < report.best_val_ppl {
            report.best_val_ppl = eval.ppl;
            if let Some(dir) = &output.checkpoint_dir {
                let path = dir.join(format!("epoch-{:03}.ckpt", epoch + 1));
                checkpoint::save(&path, model, report.steps, Some(eval.ppl), output.vocab)?;
                report.checkpoints.push(path);
            }
        }
        if cfg.max_steps.is_some_and(|m| report.steps >= m) {
            break 'epochs;
        }
    }
    Ok(report)
}
