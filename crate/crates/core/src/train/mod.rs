//! Loss, optimizer, schedule and the training loop.

mod optim;
mod schedule;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{adam_step, AdamConfig, Moments, OptimizerState};
pub use schedule::cosine_lr;

use crate::checkpoint::{checkpoint_save, CheckpointMeta};
use crate::data::{augment_batch, AugmentConfig, ImageSample};
use crate::error::{Error, Result};
use crate::metrics::{argmax, confusion_of};
use crate::model::Model;
use crate::rng;
use crate::tensor::{Scalar, Tape, Var};

/// Mean categorical cross-entropy of `logits` `[B × C]` against `labels`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Root seed for initialization, shuffling and augmentation.
    pub seed: u64,
    /// Where the best-test-accuracy checkpoint goes.
    pub checkpoint_path: Option<PathBuf>,
    /// Checkpoint rewritten after every epoch, for resuming.
    pub last_checkpoint_path: Option<PathBuf>,
    /// JSON-lines epoch log.
    pub log_path: Option<PathBuf>,
    /// Threads for per-sample gradients; `0` uses every core.
    pub workers: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: Option<f64>,
    /// Stop after this many epochs without a test-accuracy improvement.
    pub early_stop_patience: Option<usize>,
    /// Replicate minority-class samples each epoch to match the majority.
    pub oversample_minority: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 200,
            lr0: 1e-3,
            lr_min: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_path: None,
            last_checkpoint_path: None,
            log_path: None,
            workers: 0,
            weight_decay: 0.0,
            grad_clip_norm: None,
            early_stop_patience: None,
            oversample_minority: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr0 && self.lr0.is_finite()) {
            return bad(format!("train.lr_min {} must lie in [0, lr0 = {}]", self.lr_min, self.lr0));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("train.{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("train.adam_eps {} must be positive", self.adam_eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("train.weight_decay {} must be non-negative", self.weight_decay));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("train.grad_clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.epochs, self.lr0, self.lr_min)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub test_top1: Option<f64>,
    pub test_top2: Option<f64>,
    pub wall_ms: u64,
}

impl EpochRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self { wall_ms: 0, ..self.clone() } == Self { wall_ms: 0, ..other.clone() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_test_top1: Option<f64>,
    /// Optimizer steps taken, including any before a resume.
    pub steps: u64,
}

impl TrainingLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// State carried over from a checkpoint.
pub struct Resume<T> {
    pub optimizer: OptimizerState<T>,
    pub meta: CheckpointMeta,
}

/// Training order for one epoch: shuffled sample positions, with minority
/// classes topped up to the majority count when oversampling.
fn epoch_order<T>(samples: &[ImageSample<T>], cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut rng = rng::substream(cfg.seed, rng::SHUFFLE, &[epoch as u64]);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if cfg.oversample_minority {
        let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
        let mut by_class = vec![Vec::new(); classes];
        for (i, s) in samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        let majority = by_class.iter().map(Vec::len).max().unwrap_or(0);
        for members in by_class.iter_mut().filter(|m| !m.is_empty()) {
            members.shuffle(&mut rng);
            order.extend(members.iter().cycle().take(majority - members.len()));
        }
    }
    order.shuffle(&mut rng);
    order
}

fn run_pool<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

struct BatchOutcome {
    loss_sum: f64,
    hits: usize,
}

/// Sums per-sample gradients in sample order, averages them onto the
/// parameters and takes one Adam step.
fn train_batch<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut OptimizerState<T>,
    batch: &[ImageSample<T>],
    lr: f64,
    cfg: &TrainConfig,
    where_: (usize, usize),
) -> Result<BatchOutcome> {
    let mut sums: Vec<Option<Vec<T>>> = model
        .store
        .iter()
        .map(|(_, p)| p.tensor.requires_grad.then(|| vec![T::zero(); p.tensor.numel()]))
        .collect();
    let mut outcome = BatchOutcome { loss_sum: 0.0, hits: 0 };
    // Waves bound the memory held by per-sample gradients.
    let wave = rayon::current_num_threads().max(1);
    for chunk in batch.chunks(wave) {
        let results: Vec<_> = chunk
            .par_iter()
            .map(|s| model.sample_grads(&s.pixels, s.label))
            .collect::<Result<_>>()?;
        for (s, r) in chunk.iter().zip(results) {
            if !r.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {} batch {}: loss {} on sample {} (label {}); batch samples {:?}",
                    where_.0,
                    where_.1,
                    r.loss,
                    s.index,
                    s.label,
                    batch.iter().map(|s| s.index).collect::<Vec<_>>()
                )));
            }
            outcome.loss_sum += r.loss;
            outcome.hits += usize::from(argmax(&r.logits) == s.label);
            for (acc, g) in sums.iter_mut().zip(r.grads) {
                if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                    acc.iter_mut().zip(g).for_each(|(a, g)| *a = *a + g);
                }
            }
        }
    }
    let mut scale = 1.0 / batch.len() as f64;
    if let Some(max_norm) = cfg.grad_clip_norm {
        let norm = sums.iter().flatten().flatten().map(|g| g.f64().powi(2)).sum::<f64>().sqrt() * scale;
        if norm > max_norm {
            scale *= max_norm / norm;
        }
    }
    let scale = T::of(scale);
    for ((_, p), sum) in model.store.iter_mut().zip(sums) {
        p.tensor.grad = sum.map(|mut g| {
            g.iter_mut().for_each(|v| *v = *v * scale);
            g
        });
    }
    adam_step(&mut model.store, optimizer, lr, &cfg.adam())?;
    model.store.clear_grads();
    Ok(outcome)
}

/// Runs the training loop from epoch `resume.meta.epoch` (or 0) to
/// `cfg.epochs`.
///
/// Each epoch shuffles the training set with a seeded stream, augments each
/// batch, takes one Adam step per batch at the epoch's cosine rate, then
/// evaluates on `test` (when non-empty). The best-test-accuracy checkpoint
/// is written to `cfg.checkpoint_path`, and the last one to
/// `cfg.last_checkpoint_path`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[ImageSample<T>],
    test_set: &[ImageSample<T>],
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    resume: Option<Resume<T>>,
) -> Result<TrainingLog> {
    cfg.validate()?;
    augment.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let (mut optimizer, start, mut best) = match resume {
        Some(r) => (r.optimizer, r.meta.epoch, r.meta.best_test_top1),
        None => (OptimizerState::new(&model.store), 0, None),
    };
    if optimizer.moments.len() != model.store.len() {
        return Err(Error::State("resumed optimizer does not match the model".into()));
    }
    let mut log_file = match &cfg.log_path {
        Some(path) => Some(
            OpenOptions::new()
                .create(true)
                .write(true)
                .append(start > 0)
                .truncate(start == 0)
                .open(path)
                .map_err(|e| Error::io(path, e))
                .map(|f: File| (path.clone(), f))?,
        ),
        None => None,
    };

    let mut log = TrainingLog {
        best_test_top1: best,
        steps: optimizer.step,
        ..TrainingLog::default()
    };
    let mut since_best = 0;
    for epoch in start..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr(epoch);
        let order = epoch_order(train_set, cfg, epoch);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<ImageSample<T>> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let batch = augment_batch(&batch, augment, cfg.seed, epoch as u64);
            let out = run_pool(cfg.workers, || train_batch(model, &mut optimizer, &batch, lr, cfg, (epoch + 1, b)))??;
            loss_sum += out.loss_sum;
            hits += out.hits;
        }
        let (test_top1, test_top2) = if test_set.is_empty() {
            (None, None)
        } else {
            let (cm, top2) = run_pool(cfg.workers, || confusion_of(model, test_set))??;
            let n = cm.total() as f64;
            (Some(cm.trace() as f64 / n), Some(top2 as f64 / n))
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / order.len() as f64,
            train_top1: hits as f64 / order.len() as f64,
            test_top1,
            test_top2,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {} lr {:.3e} loss {:.5} train {:.4} test {:?}",
            record.epoch,
            lr,
            record.train_loss,
            record.train_top1,
            record.test_top1
        );

        let improved = match (test_top1, best) {
            (Some(t), Some(b)) => t > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = test_top1;
            log.best_epoch = Some(epoch + 1);
            since_best = 0;
        } else {
            since_best += 1;
        }
        log.best_test_top1 = best;
        let meta = CheckpointMeta {
            epoch: epoch + 1,
            best_test_top1: best,
            seed: cfg.seed,
        };
        // Without a test split the latest epoch stands in for the best.
        if let Some(path) = &cfg.checkpoint_path {
            if improved || test_set.is_empty() {
                checkpoint_save(path, model, Some(&optimizer), &meta)?;
            }
        }
        if let Some(path) = &cfg.last_checkpoint_path {
            checkpoint_save(path, model, Some(&optimizer), &meta)?;
        }
        if let Some((path, f)) = log_file.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        log.records.push(record);
        log.steps = optimizer.step;

        if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
            log::info!("early stop after {} epochs without improvement", since_best);
            break;
        }
    }
    Ok(log)
}
