//! Mini-batch SGD with a step-decayed learning rate and global-norm clipping.

use std::path::{Path, PathBuf};

use crate::config::KvConfig;
use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::io::write_lines_atomic;
use crate::nmt::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Rng};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1 << 32;
const DROPOUT_STREAM: u64 = 2 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayMode {
    /// Multiply by `decay` every epoch after `decay_start_epoch`.
    PerEpoch,
    /// Multiply by `decay` once, from `decay_start_epoch + 1` on.
    OneShot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_start_epoch: usize,
    pub decay_mode: DecayMode,
    pub grad_clip: f64,
    pub seed: u64,
    /// Group similar source lengths into batches (batch order still shuffled).
    pub bucket: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 18,
            batch_size: 64,
            lr0: 1.0,
            decay: 0.5,
            decay_start_epoch: 10,
            decay_mode: DecayMode::PerEpoch,
            grad_clip: 5.0,
            seed: 1,
            bucket: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || !(self.decay > 0.0 && self.decay <= 1.0)
            || !(self.grad_clip > 0.0)
            || !(self.lr0 >= 0.0)
        {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    pub fn from_kv(cfg: &KvConfig, base: &TrainConfig) -> Result<Self> {
        let decay_mode = match cfg.raw("decay_mode") {
            None => base.decay_mode,
            Some("per_epoch") => DecayMode::PerEpoch,
            Some("one_shot") => DecayMode::OneShot,
            Some(other) => return Err(Error::Config(format!("unknown decay_mode {other}"))),
        };
        let out = Self {
            epochs: cfg.get_or("epochs", base.epochs)?,
            batch_size: cfg.get_or("batch_size", base.batch_size)?,
            lr0: cfg.get_or("lr0", base.lr0)?,
            decay: cfg.get_or("decay", base.decay)?,
            decay_start_epoch: cfg.get_or("decay_start_epoch", base.decay_start_epoch)?,
            decay_mode,
            grad_clip: cfg.get_or("grad_clip", base.grad_clip)?,
            seed: cfg.get_or("seed", base.seed)?,
            bucket: cfg.get_or("bucket", base.bucket)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_kv(&self, prefix: &str, out: &mut KvConfig) {
        out.set(format!("{prefix}epochs"), self.epochs);
        out.set(format!("{prefix}batch_size"), self.batch_size);
        out.set(format!("{prefix}lr0"), self.lr0);
        out.set(format!("{prefix}decay"), self.decay);
        out.set(format!("{prefix}decay_start_epoch"), self.decay_start_epoch);
        let mode = match self.decay_mode {
            DecayMode::PerEpoch => "per_epoch",
            DecayMode::OneShot => "one_shot",
        };
        out.set(format!("{prefix}decay_mode"), mode);
        out.set(format!("{prefix}grad_clip"), self.grad_clip);
        out.set(format!("{prefix}seed"), self.seed);
        out.set(format!("{prefix}bucket"), self.bucket);
    }
}

/// Learning rate for a 1-based epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch <= cfg.decay_start_epoch {
        return cfg.lr0;
    }
    match cfg.decay_mode {
        DecayMode::PerEpoch => cfg.lr0 * cfg.decay.powi((epoch - cfg.decay_start_epoch) as i32),
        DecayMode::OneShot => cfg.lr0 * cfg.decay,
    }
}

/// Pair indices for every batch of one epoch. The shuffle depends only on
/// `(seed, epoch)`; every pair appears exactly once.
pub fn make_batches(
    corpus: &ParallelCorpus,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    bucket: bool,
) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut rng = Rng::new(seed).derive(SHUFFLE_STREAM + epoch as u64);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    rng.shuffle(&mut order);
    if bucket {
        // stable sort keeps the shuffled order among equal lengths
        order.sort_by_key(|&i| corpus.pairs[i].source.len());
        let mut batches: Vec<Vec<usize>> =
            order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        rng.shuffle(&mut batches);
        return batches;
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub valid_nll: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Validation per-token NLL of the initialization.
    pub initial_valid_nll: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest validation loss (0 = initialization).
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Tab-separated `epoch, lr, train_nll, valid_nll`, one line per epoch.
    pub fn to_tsv(&self) -> Vec<String> {
        self.epochs
            .iter()
            .map(|r| {
                let valid = r
                    .valid_nll
                    .map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
                format!("{}\t{}\t{:.6}\t{}", r.epoch, r.lr, r.train_nll, valid)
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for per-epoch checkpoints, `best.model` and `history.tsv`.
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

/// Per-token NLL of a corpus in evaluation mode.
pub fn evaluate_nll<T: Scalar>(
    model: &Model<T>,
    corpus: &ParallelCorpus,
    batch_size: usize,
) -> Result<f64> {
    let mut rng = Rng::new(0);
    let (mut sum, mut tokens) = (0.0, 0usize);
    for chunk in corpus.pairs.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let mut g = model.graph();
        let (loss, n) = model.batch_loss(&mut g, &refs, &mut rng, false)?;
        sum += g.value(loss).data()[0].to_f64_lossy();
        tokens += n;
    }
    Ok(sum / tokens.max(1) as f64)
}

/// Trains a freshly initialized model (seeded by `cfg.seed`).
pub fn train<T: Scalar>(
    corpus: &ParallelCorpus,
    valid: &ParallelCorpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(Model<T>, TrainHistory)> {
    let model = Model::new(
        model_cfg.clone(),
        Rng::new(cfg.seed).derive(INIT_STREAM).next_u64(),
    )?;
    train_from(model, corpus, valid, cfg, opts)
}

/// Continues training `model`; returns the final-epoch parameters.
pub fn train_from<T: Scalar>(
    mut model: Model<T>,
    corpus: &ParallelCorpus,
    valid: &ParallelCorpus,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(Model<T>, TrainHistory)> {
    cfg.validate()?;
    if cfg.epochs > 0 && corpus.is_empty() {
        return Err(Error::EmptyCorpus("training corpus"));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let eval_valid = |m: &Model<T>| -> Result<Option<f64>> {
        if valid.is_empty() {
            Ok(None)
        } else {
            evaluate_nll(m, valid, cfg.batch_size).map(Some)
        }
    };
    let mut history = TrainHistory {
        initial_valid_nll: eval_valid(&model)?,
        ..Default::default()
    };
    let mut best = history.initial_valid_nll.unwrap_or(f64::INFINITY);
    save_checkpoint(&model, opts.out_dir.as_deref(), "best.model")?;

    let mut grads = Gradients::zeros_like(model.params.store());
    let clip = T::lit(cfg.grad_clip);
    for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut rng = Rng::new(cfg.seed).derive(DROPOUT_STREAM + epoch as u64);
        let (mut sum, mut tokens, mut norm_sum) = (0.0, 0usize, 0.0);
        let batches = make_batches(corpus, cfg.batch_size, cfg.seed, epoch, cfg.bucket);
        for (b, idx) in batches.iter().enumerate() {
            let pairs: Vec<_> = idx.iter().map(|&i| &corpus.pairs[i]).collect();
            grads.zero();
            {
                let mut g = model.graph();
                let (loss, n) = model.batch_loss(&mut g, &pairs, &mut rng, true)?;
                let total = g.value(loss).data()[0].to_f64_lossy();
                if !total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b + 1,
                    });
                }
                let mean = g.scale(loss, T::lit(1.0 / n as f64));
                g.backward(mean, &mut grads)?;
                sum += total;
                tokens += n;
            }
            norm_sum += grads.clip_global_norm(clip).to_f64_lossy();
            model.params.store_mut().sgd_step(&grads, T::lit(lr));
        }
        if !model.params.store().is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batches.len(),
            });
        }
        let valid_nll = eval_valid(&model)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_nll: sum / tokens.max(1) as f64,
            valid_nll,
            grad_norm: norm_sum / batches.len().max(1) as f64,
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch} lr {lr} train_nll {:.4} valid_nll {}",
                record.train_nll,
                valid_nll.map_or("-".into(), |v| format!("{v:.4}"))
            );
        }
        history.epochs.push(record);
        save_checkpoint(
            &model,
            opts.out_dir.as_deref(),
            &format!("epoch_{epoch:03}.model"),
        )?;
        if let Some(v) = valid_nll {
            if v < best {
                best = v;
                history.best_epoch = epoch;
                save_checkpoint(&model, opts.out_dir.as_deref(), "best.model")?;
            }
        }
        if let Some(dir) = &opts.out_dir {
            write_lines_atomic(&dir.join("history.tsv"), &history.to_tsv())?;
        }
    }
    Ok((model, history))
}

fn save_checkpoint<T: Scalar>(model: &Model<T>, dir: Option<&Path>, name: &str) -> Result<()> {
    match dir {
        Some(dir) => model.save(&dir.join(name)),
        None => Ok(()),
    }
}
