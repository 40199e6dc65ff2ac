//! Mini-batch SGD with weight decay, learning-rate schedules, per-epoch
//! evaluation, early stopping, metric logging and checkpointing.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradientMap, Tape, Var};
use crate::checkpoint::{epoch_dir, save_checkpoint, CheckpointMeta};
use crate::ctc::{ctc_loss_batch, LabelSequence};
use crate::data::{Label, LabeledImage};
use crate::error::{Error, Result};
use crate::layers::{apply_buffer_updates, cross_entropy, ForwardCtx};
use crate::model::{classify_from_logits, decode_from_logits, Model, Task};
use crate::params::Parameterized;
use crate::rng::stream_rng;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// 0.001 at epoch 0, then `0.005 · 0.4^e`.
    Text,
    /// 0.001 before epoch 50, 0.0001 through epoch 100, 0.00001 after.
    Mnist,
    Constant(f64),
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Text if epoch == 0 => 0.001,
            LrSchedule::Text => 0.005 * 0.4f64.powi(epoch as i32),
            LrSchedule::Mnist if epoch < 50 => 0.001,
            LrSchedule::Mnist if epoch <= 100 => 0.0001,
            LrSchedule::Mnist => 0.00001,
            LrSchedule::Constant(lr) => lr,
        }
    }
}

fn default_weight_decay() -> f64 {
    1e-4
}
fn default_patience() -> usize {
    2
}
fn default_min_delta() -> f64 {
    1e-4
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub early_stop: bool,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Batch size for evaluation passes; defaults to `batch_size`.
    #[serde(default)]
    pub eval_batch_size: Option<usize>,
    /// Record elapsed seconds in the metric log. Off by default so that
    /// logs of identical runs are byte-identical.
    #[serde(default)]
    pub wall_clock: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == Some(0) {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if let LrSchedule::Constant(lr) = self.lr_schedule {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "learning rate {lr} is not a non-negative number"
                )));
            }
        }
        Ok(())
    }
}

/// `θ ← θ − lr·(g + wd·θ)` on kernels and biases, `θ ← θ − lr·g` on BN
/// scale and shift. Running statistics are left alone.
pub fn sgd_step<P: Parameterized>(
    params: &mut P,
    grads: &GradientMap,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    Sgd::new(weight_decay, 0.0).step(params, grads, lr)
}

/// SGD with optional heavy-ball momentum (`v ← μv + g`, `θ ← θ − lr·v`).
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub weight_decay: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(weight_decay: f64, momentum: f64) -> Self {
        Sgd {
            weight_decay,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step<P: Parameterized>(
        &mut self,
        params: &mut P,
        grads: &GradientMap,
        lr: f64,
    ) -> Result<()> {
        let mut missing = None;
        params.visit("", &mut |path, _, kind| {
            if kind.is_learnable() && missing.is_none() && grads.get(path).is_none() {
                missing = Some(path.to_string());
            }
        });
        if let Some(path) = missing {
            return Err(Error::Contract(format!("no gradient for parameter {path}")));
        }
        let (wd, mu) = (self.weight_decay, self.momentum);
        let velocity = &mut self.velocity;
        params.visit_mut("", &mut |path, t, kind| {
            if !kind.is_learnable() {
                return;
            }
            let g = grads.get(path).expect("checked above");
            let decay = if kind.decays() { wd } else { 0.0 };
            if mu == 0.0 {
                for (w, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * (gv + decay * *w);
                }
            } else {
                let v = velocity
                    .entry(path.to_string())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for ((w, &gv), vi) in t.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vi = mu * *vi + gv + decay * *w;
                    *w -= lr * *vi;
                }
            }
        });
        Ok(())
    }
}

/// Stops once the monitored loss has failed to improve on the best value
/// by at least `min_delta` for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one epoch's loss; returns `true` when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss <= self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricLog {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
            .collect()
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(MetricLog { epochs })
    }

    /// Epoch with the lowest test loss (earliest on ties).
    pub fn best_epoch(&self) -> Option<usize> {
        self.epochs
            .iter()
            .min_by(|a, b| a.test_loss.total_cmp(&b.test_loss))
            .map(|m| m.epoch)
    }
}

/// Mean loss and accuracy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    /// Top-1 for classification, exact string match for sequences.
    pub accuracy: f64,
}

/// Stacks `(1,h,w,c)` images into one `(n,h,w,c)` batch.
pub fn stack_images(samples: &[&LabeledImage]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let s = first.image.shape();
    let mut data = Vec::with_capacity(samples.len() * s.len());
    for x in samples {
        if x.image.shape() != s {
            return Err(Error::Dimension(format!(
                "batch mixes image shapes {s} and {}",
                x.image.shape()
            )));
        }
        data.extend_from_slice(x.image.data());
    }
    Tensor::new(
        Shape {
            n: samples.len(),
            ..s
        },
        data,
    )
}

/// Checks that every sample's label suits the model's task.
pub fn check_dataset(model: &Model, data: &[LabeledImage]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Contract("dataset is empty".into()));
    }
    let frames = model.config.frame_count();
    for (i, sample) in data.iter().enumerate() {
        match (&model.config.task, &sample.label) {
            (Task::Classify { classes }, Label::Class(k)) if k < classes => {}
            (Task::Sequence { alphabet }, Label::Sequence(seq)) => {
                if seq.max_label().is_some_and(|m| m > *alphabet) {
                    return Err(Error::Contract(format!(
                        "sample {i}: label outside alphabet of {alphabet}"
                    )));
                }
                let required = seq.required_frames();
                if required > frames {
                    return Err(Error::Infeasible {
                        required,
                        available: frames,
                    });
                }
            }
            _ => {
                return Err(Error::Contract(format!(
                    "sample {i}: label {:?} does not fit task {:?}",
                    sample.label, model.config.task
                )))
            }
        }
    }
    Ok(())
}

/// Batch loss node plus the number of correct predictions in the batch.
fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    logits: Var,
    batch: &[&LabeledImage],
) -> Result<(Var, usize)> {
    let z = tape.value(logits).clone();
    match model.config.task {
        Task::Classify { .. } => {
            let labels: Vec<usize> = batch
                .iter()
                .map(|s| s.class().expect("checked dataset"))
                .collect();
            let correct = classify_from_logits(&z)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            Ok((cross_entropy(tape, logits, &labels)?, correct))
        }
        Task::Sequence { .. } => {
            let targets: Vec<LabelSequence> = batch
                .iter()
                .map(|s| s.sequence().expect("checked dataset").clone())
                .collect();
            let decoded = decode_from_logits(&z)?;
            let correct = decoded.iter().zip(&targets).filter(|(p, t)| p == t).count();
            Ok((ctc_loss_batch(tape, logits, &targets)?, correct))
        }
    }
}

/// Eval-mode loss and accuracy over `data`.
pub fn evaluate(model: &Model, data: &[LabeledImage], batch_size: usize) -> Result<Evaluation> {
    check_dataset(model, data)?;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let refs: Vec<&LabeledImage> = data.iter().collect();
    for batch in refs.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let x = tape.constant(stack_images(batch)?);
        let logits = model.forward(&mut tape, &mut ForwardCtx::eval(), x)?;
        let (loss, ok) = batch_loss(&mut tape, model, logits, batch)?;
        loss_sum += tape.value(loss).item() * batch.len() as f64;
        correct += ok;
    }
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// How a training run ended.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: MetricLog,
    pub stopped_early: bool,
}

type LossOverride = Box<dyn FnMut(usize, f64) -> f64>;

/// Drives [`TrainConfig`] over a model.
pub struct Trainer {
    pub config: TrainConfig,
    /// Print progress to standard error.
    pub verbose: bool,
    test_loss_override: Option<LossOverride>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            config,
            verbose: false,
            test_loss_override: None,
        })
    }

    /// Replaces the measured test loss of each epoch before early stopping
    /// and logging see it.
    pub fn with_test_loss_override(mut self, f: impl FnMut(usize, f64) -> f64 + 'static) -> Self {
        self.test_loss_override = Some(Box::new(f));
        self
    }

    /// Trains `model` in place. With `out_dir`, writes `metrics.jsonl` and
    /// a checkpoint per epoch under `out_dir/checkpoints`.
    pub fn run(
        &mut self,
        model: &mut Model,
        train: &[LabeledImage],
        test: &[LabeledImage],
        out_dir: Option<&Path>,
    ) -> Result<TrainOutcome> {
        check_dataset(model, train)?;
        check_dataset(model, test)?;
        let cfg = self.config.clone();
        let eval_batch = cfg.eval_batch_size.unwrap_or(cfg.batch_size);
        let mut metrics_file = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                Some((File::create(&path).map_err(|e| Error::io(&path, e))?, path))
            }
            None => None,
        };
        let mut sgd = Sgd::new(cfg.weight_decay, cfg.momentum);
        let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
        let mut log = MetricLog::default();
        let started = Instant::now();
        let mut step = 0u64;
        let mut order: Vec<usize> = (0..train.len()).collect();

        for epoch in 0..cfg.max_epochs {
            let lr = cfg.lr_schedule.lr_at(epoch);
            order.sort_unstable();
            order.shuffle(&mut stream_rng(cfg.seed, "shuffle", epoch as u64));
            let mut loss_sum = 0.0;
            let mut correct = 0;
            let batches = order.len().div_ceil(cfg.batch_size);
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<&LabeledImage> = idx.iter().map(|&i| &train[i]).collect();
                let mut tape = Tape::new();
                let mut ctx = ForwardCtx::train(stream_rng(cfg.seed, "dropout", step));
                step += 1;
                let x = tape.constant(stack_images(&batch)?);
                let logits = model.forward(&mut tape, &mut ctx, x)?;
                let (loss, ok) = batch_loss(&mut tape, model, logits, &batch)?;
                let loss_value = tape.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                let grads = tape.backward(loss)?;
                sgd.step(model, &grads, lr)?;
                apply_buffer_updates(model, ctx.take_updates())?;
                loss_sum += loss_value * batch.len() as f64;
                correct += ok;
                if self.verbose && ((b + 1) % 10 == 0 || b + 1 == batches) {
                    eprintln!(
                        "epoch {epoch} batch {}/{batches} loss {loss_value:.5}",
                        b + 1
                    );
                }
            }
            let eval = evaluate(model, test, eval_batch)?;
            let test_loss = match self.test_loss_override.as_mut() {
                Some(f) => f(epoch, eval.loss),
                None => eval.loss,
            };
            let metrics = EpochMetrics {
                epoch,
                lr,
                train_loss: loss_sum / train.len() as f64,
                test_loss,
                train_acc: correct as f64 / train.len() as f64,
                test_acc: eval.accuracy,
                wall_seconds: cfg.wall_clock.then(|| started.elapsed().as_secs_f64()),
            };
            if self.verbose {
                eprintln!("{}", serde_json::to_string(&metrics)?);
            }
            log.epochs.push(metrics.clone());
            if let (Some((file, path)), Some(dir)) = (metrics_file.as_mut(), out_dir) {
                writeln!(file, "{}", serde_json::to_string(&metrics)?)
                    .map_err(|e| Error::io(path.as_path(), e))?;
                file.flush().map_err(|e| Error::io(path.as_path(), e))?;
                let meta = CheckpointMeta {
                    epoch,
                    config_hash: model.config.hash(),
                    model: model.config.clone(),
                    metrics: log.epochs.clone(),
                    best_epoch: log.best_epoch(),
                };
                save_checkpoint(&epoch_dir(&dir.join("checkpoints"), epoch), model, meta)?;
            }
            if cfg.early_stop && stopper.observe(test_loss) {
                return Ok(TrainOutcome {
                    log,
                    stopped_early: true,
                });
            }
        }
        Ok(TrainOutcome {
            log,
            stopped_early: false,
        })
    }
}
