use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LiftError, Result};
use crate::head::{LiftingHead, PoseOutput};
use crate::nn::ForwardCtx;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::adam::{adam_step, AdamState};
use crate::training::augment::sample_patch_subset;
use crate::training::average::average_checkpoints;
use crate::training::checkpoint::save_checkpoint;
use crate::training::loss::{pose_loss, LossWeights};
use crate::training::schedule::lr_at;

/// One training example: backbone features and the pose they encode.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Scalar> {
    /// `n_patches × c_in`
    pub features: Tensor<T>,
    pub target: PoseOutput<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub avg_last_epochs: usize,
    pub seed: u64,
    /// Lower bound on retained patches; `None` means a quarter of the grid.
    pub min_keep_patches: Option<usize>,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 5e-4,
            warmup_steps: 4000,
            epochs: 200,
            batch_size: 64,
            avg_last_epochs: 10,
            seed: 0,
            min_keep_patches: None,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Short run for the small profile: 500 epochs of four batches on a
    /// 64-sample set is 2000 steps. Augmentation is off and keypoints are
    /// weighted up, since this profile exists to fit a small set quickly.
    pub fn tiny() -> Self {
        Self {
            max_lr: 5e-3,
            warmup_steps: 300,
            epochs: 500,
            batch_size: 16,
            avg_last_epochs: 10,
            seed: 0,
            min_keep_patches: Some(16),
            weights: LossWeights {
                keypoint: 10.0,
                twist: 1.0,
                beta: 1.0,
            },
        }
    }

    pub fn min_keep(&self, n_patches: usize) -> usize {
        self.min_keep_patches.unwrap_or((n_patches / 4).max(1))
    }

    pub fn validate(&self, n_patches: usize) -> Result<()> {
        if !self.max_lr.is_finite() || self.max_lr <= 0.0 {
            return Err(LiftError::config("max_lr", "must be positive"));
        }
        if self.warmup_steps == 0 {
            return Err(LiftError::config("warmup_steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(LiftError::config("batch_size", "must be positive"));
        }
        if self.avg_last_epochs == 0 {
            return Err(LiftError::config("avg_last_epochs", "must be positive"));
        }
        let k = self.min_keep(n_patches);
        if k == 0 || k > n_patches {
            return Err(LiftError::config(
                "min_keep_patches",
                format!("{k} is outside [1, {n_patches}]"),
            ));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:e}\t{:e}\t{:.3}",
            self.step, self.epoch, self.lr, self.loss, self.wall_ms
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport<T: Scalar> {
    pub log: Vec<StepRecord>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean of the last `avg_last_epochs` end-of-epoch parameter sets.
    pub averaged: Option<ParamStore<T>>,
    pub optimizer: AdamState<T>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

pub const AVERAGED_CHECKPOINT: &str = "averaged.ckpt";

/// Runs the full training procedure.
///
/// Each epoch shuffles the data, draws one patch subset per batch, and takes
/// one Adam step per batch at the scheduled learning rate. End-of-epoch
/// parameters are written to `checkpoint_dir` when given; the last
/// `avg_last_epochs` of them are averaged into the final model.
pub fn train<T: Scalar>(
    head: &LiftingHead,
    store: &mut ParamStore<T>,
    data: &[Sample<T>],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport<T>> {
    train_from(head, store, AdamState::new(store), data, cfg, checkpoint_dir)
}

/// [`train`] resuming from existing optimizer state.
pub fn train_from<T: Scalar>(
    head: &LiftingHead,
    store: &mut ParamStore<T>,
    mut optimizer: AdamState<T>,
    data: &[Sample<T>],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport<T>> {
    let hc = head.config();
    cfg.validate(hc.n_patches)?;
    if data.is_empty() {
        return Err(LiftError::EmptyDataset);
    }
    if let Some(dir) = checkpoint_dir {
        if cfg.epochs > 0 {
            fs::create_dir_all(dir)?;
        }
    }
    let min_keep = cfg.min_keep(hc.n_patches);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut recent: VecDeque<ParamStore<T>> = VecDeque::new();
    let mut report = TrainReport {
        log: Vec::new(),
        epoch_losses: Vec::new(),
        averaged: None,
        optimizer: optimizer.clone(),
        checkpoints: Vec::new(),
    };
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let rows = sample_patch_subset(hc.n_patches, min_keep, &mut rng);
            let subset = (rows.len() < hc.n_patches).then_some(rows.as_slice());
            let step = optimizer.step + 1;
            let lr = lr_at(step, cfg.max_lr, cfg.warmup_steps)?;

            let (loss, grads) = {
                let mut tape = Tape::with_params(&*store);
                let mut ctx = ForwardCtx::train(hc.dropout, &mut rng);
                let mut total = None;
                for &i in batch {
                    let sample = &data[i];
                    let features = match subset {
                        Some(rows) => select_rows(&sample.features, rows)?,
                        None => sample.features.clone(),
                    };
                    let x = tape.leaf(features);
                    let trace = head.forward(&mut tape, x, subset, &mut ctx)?;
                    let l = pose_loss(&mut tape, &trace.pose, &sample.target, &cfg.weights)?;
                    total = Some(match total {
                        Some(acc) => tape.add(acc, l)?,
                        None => l,
                    });
                }
                let total = total.expect("non-empty batch");
                let mean = tape.scale(total, T::one() / T::from_usize(batch.len()).unwrap());
                let loss = tape.value(mean).data()[0].to_f64_lossless();
                if !loss.is_finite() {
                    return Err(LiftError::NonFiniteLoss { step, lr, loss });
                }
                (loss, tape.backward(mean)?)
            };
            grads.accumulate_into(store);
            adam_step(store, &mut optimizer, lr)?;

            report.log.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            epoch_loss += loss;
            batches += 1;
        }
        report.epoch_losses.push(epoch_loss / batches as f64);

        if let Some(dir) = checkpoint_dir {
            let path = dir.join(epoch_checkpoint_name(epoch));
            save_checkpoint(&path, store, Some(&optimizer))?;
            report.checkpoints.push(path);
        }
        recent.push_back(store.snapshot());
        if recent.len() > cfg.avg_last_epochs {
            recent.pop_front();
        }
    }

    if !recent.is_empty() {
        let recent: Vec<_> = recent.into_iter().collect();
        let averaged = average_checkpoints(&recent)?;
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(AVERAGED_CHECKPOINT);
            save_checkpoint(&path, &averaged, None)?;
            report.checkpoints.push(path);
        }
        report.averaged = Some(averaged);
    }
    report.optimizer = optimizer;
    Ok(report)
}

/// Copies the listed rows of a rank-2 tensor.
pub fn select_rows<T: Scalar>(x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let (m, n) = x.dims2();
    if rows.iter().any(|&r| r >= m) {
        return Err(LiftError::shape("select_rows", x.shape(), rows));
    }
    let data = rows.iter().flat_map(|&r| x.row(r).iter().copied()).collect();
    Tensor::from_vec(&[rows.len(), n], data)
}
