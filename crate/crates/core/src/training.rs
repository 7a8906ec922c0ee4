//! Online-patch training of the autoencoder.
//!
//! Every epoch presents `samples_per_epoch` patches (the last epoch may be
//! shorter so the total budget is met exactly). Patch `d` of epoch `e` comes
//! from a frame and position keyed by `(seed, e, d)`, so runs are
//! reproducible while patches change between epochs. Each batch is split into
//! fixed chunks whose gradients are summed in chunk order, so results do not
//! depend on the number of workers.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderConfig, AutoencoderModel, ConfigError, PATCH_EXTENT};
use crate::par;
use crate::preprocessing::{self, extract_patch, patch_coords_at, Frame, Scale};
use crate::rng::{hash_str, key, Stream};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, TensorError};

/// Patches per gradient chunk.
const CHUNK: usize = 16;

pub const DEFAULT_VALIDATION_PATCHES: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ConfigError),
    #[error("training set is empty")]
    EmptyTraining,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("training frame {0} is labeled anomalous")]
    AnomalousTraining(String),
    #[error("frame {frame} has {found} channels, model expects {expected}")]
    Channels { frame: String, expected: usize, found: usize },
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite validation loss after epoch {0}")]
    NonFiniteValidation(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub scale: Scale,
    pub total_samples: usize,
    pub batch_size: usize,
    pub samples_per_epoch: usize,
    pub initial_lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Relative validation improvement below which an epoch is stagnant.
    pub improvement_threshold: f64,
    pub validation_patches: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            scale: Scale::S8,
            total_samples: 2_000_000,
            batch_size: 128,
            samples_per_epoch: 20_000,
            initial_lr: 1e-3,
            plateau_patience: 8,
            plateau_factor: 10.0,
            improvement_threshold: 1e-3,
            validation_patches: DEFAULT_VALIDATION_PATCHES,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainingError::Config(m.to_string()));
        if self.total_samples == 0 {
            return bad("total_samples must be > 0");
        }
        if self.batch_size == 0 || self.samples_per_epoch == 0 {
            return bad("batch_size and samples_per_epoch must be > 0");
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be >= 1");
        }
        if !(self.plateau_factor > 1.0) {
            return bad("plateau_factor must be > 1");
        }
        if !(self.improvement_threshold >= 0.0) {
            return bad("improvement_threshold must be >= 0");
        }
        if self.validation_patches == 0 {
            return bad("validation_patches must be > 0");
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.total_samples.div_ceil(self.samples_per_epoch)
    }

    /// Patches presented in `epoch` (0-based).
    pub fn epoch_samples(&self, epoch: usize) -> usize {
        let done = epoch * self.samples_per_epoch;
        self.samples_per_epoch.min(self.total_samples.saturating_sub(done))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub improvement_threshold: f64,
}

impl TrainingHistory {
    pub fn new(improvement_threshold: f64) -> Self {
        Self {
            records: Vec::new(),
            best_epoch: None,
            improvement_threshold,
        }
    }

    pub fn push(&mut self, record: EpochRecord) {
        let better = self
            .best_epoch
            .is_none_or(|b| record.val_loss < self.records[b].val_loss);
        self.records.push(record);
        if better {
            self.best_epoch = Some(self.records.len() - 1);
        }
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|b| &self.records[b])
    }

    pub fn samples(&self) -> usize {
        self.records.iter().map(|r| r.samples).sum()
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,train_loss,val_loss,lr,seconds")?;
        for r in &self.records {
            writeln!(out, "{},{:e},{:e},{:e},{:.3}", r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()
    }
}

/// Learning rate for the next epoch. The rate is divided by `factor` once
/// more than `patience` consecutive epochs have failed to improve the best
/// validation loss by the relative threshold, counting only epochs since the
/// last improvement or the last rate change.
pub fn plateau_schedule(history: &TrainingHistory, patience: usize, factor: f64) -> f64 {
    let Some(last) = history.records.last() else {
        return f64::NAN;
    };
    let mut best = f64::INFINITY;
    let mut stagnant = 0usize;
    let mut prev_lr = None;
    for r in &history.records {
        if prev_lr.is_some_and(|lr| lr != r.lr) {
            stagnant = 0;
        }
        prev_lr = Some(r.lr);
        if r.val_loss < best * (1.0 - history.improvement_threshold) || best.is_infinite() {
            stagnant = 0;
        } else {
            stagnant += 1;
        }
        best = best.min(r.val_loss);
    }
    if stagnant > patience {
        last.lr / factor
    } else {
        last.lr
    }
}

/// A downsampled, standardized training image and its sampling identity.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub id: u64,
    pub image: Tensor,
}

impl PreparedFrame {
    pub fn new(frame: &Frame, scale: Scale) -> Self {
        Self {
            id: hash_str(&frame.source_id),
            image: preprocessing::prepare(frame, scale),
        }
    }
}

pub fn prepare_frames(frames: &[Frame], scale: Scale) -> Vec<PreparedFrame> {
    par::map(frames, |f| PreparedFrame::new(f, scale))
}

/// The fixed, seeded validation patch set: patch `j` comes from frame
/// `j mod n` at a position keyed by `(seed, frame id, j)`. Whole-frame
/// images yield one patch each.
pub fn validation_patches(frames: &[PreparedFrame], count: usize, seed: u64) -> Vec<Tensor> {
    if frames.is_empty() {
        return Vec::new();
    }
    let whole = frames[0].image.shape()[1] == PATCH_EXTENT && frames[0].image.shape()[2] == PATCH_EXTENT;
    let count = if whole { frames.len() } else { count };
    par::map_range(count, |j| {
        let f = &frames[j % frames.len()];
        let (h, w) = (f.image.shape()[1], f.image.shape()[2]);
        let c = patch_coords_at(h, w, key(&[seed, 0x7a1, f.id]), j as u64);
        extract_patch(&f.image, c).expect("coords are in bounds")
    })
}

/// Mean reconstruction MSE over `patches`.
pub fn validate_patches(model: &AutoencoderModel, patches: &[Tensor]) -> Result<f64> {
    if patches.is_empty() {
        return Err(TrainingError::EmptyValidation);
    }
    let losses = par::map(patches, |p| -> std::result::Result<f64, TensorError> {
        let recon = model.forward(p)?;
        crate::tensor::mse_loss(&recon, p)
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / patches.len() as f64)
}

/// Validation loss over the default seeded patch set of `frames`.
pub fn validate(model: &AutoencoderModel, frames: &[Frame], scale: Scale, seed: u64) -> Result<f64> {
    if frames.is_empty() {
        return Err(TrainingError::EmptyValidation);
    }
    let prepared = prepare_frames(frames, scale);
    validate_patches(model, &validation_patches(&prepared, DEFAULT_VALIDATION_PATCHES, seed))
}

/// The patch presented as draw `draw` of `epoch`.
fn draw_patch(frames: &[PreparedFrame], seed: u64, epoch: usize, draw: usize) -> Tensor {
    let mut s = Stream::new(key(&[seed, 0x74a1, epoch as u64, draw as u64]));
    let f = &frames[s.below_incl(frames.len() - 1)];
    let (h, w) = (f.image.shape()[1], f.image.shape()[2]);
    let c = patch_coords_at(h, w, key(&[seed, f.id, epoch as u64]), draw as u64);
    extract_patch(&f.image, c).expect("coords are in bounds")
}

/// Loss and gradients of one chunk, scaled by `weight`.
fn chunk_gradients(model: &AutoencoderModel, patches: &[Tensor], weight: f32) -> std::result::Result<(f64, Vec<Tensor>), TensorError> {
    let shape = patches[0].shape();
    let mut data = Vec::with_capacity(patches.len() * patches[0].len());
    for p in patches {
        data.extend_from_slice(p.data());
    }
    let batch = Tensor::new([patches.len(), shape[0], shape[1], shape[2]], data)?;
    let mut g = Graph::new();
    let x = g.constant(&batch);
    let (recon, _, vars) = model.record(&mut g, x)?;
    let loss = g.mse_loss(recon, x)?;
    let value = g.value(loss).data()[0] as f64;
    let mut grads = g.gradients(loss, &vars)?.into_tensors();
    for t in &mut grads {
        t.data_mut().iter_mut().for_each(|v| *v *= weight);
    }
    Ok((value, grads))
}

/// Train from scratch on frames. Training frames must be unlabeled or
/// labeled normal.
pub fn train(
    config: &TrainingConfig,
    model_config: AutoencoderConfig,
    train_frames: &[Frame],
    validation_frames: &[Frame],
) -> Result<(AutoencoderModel, TrainingHistory)> {
    config.validate()?;
    model_config.validate()?;
    if train_frames.is_empty() {
        return Err(TrainingError::EmptyTraining);
    }
    if validation_frames.is_empty() {
        return Err(TrainingError::EmptyValidation);
    }
    for f in train_frames.iter().chain(validation_frames) {
        if f.label.as_ref().is_some_and(|l| !l.is_normal()) {
            return Err(TrainingError::AnomalousTraining(f.source_id.clone()));
        }
        if f.channels() != model_config.input_channels {
            return Err(TrainingError::Channels {
                frame: f.source_id.clone(),
                expected: model_config.input_channels,
                found: f.channels(),
            });
        }
    }
    let train_images = prepare_frames(train_frames, config.scale);
    let val_images = prepare_frames(validation_frames, config.scale);
    let val = validation_patches(&val_images, config.validation_patches, config.seed);
    let model = AutoencoderModel::build(model_config)?;
    train_prepared(config, model, &train_images, &val, |_| {})
}

/// Train `model` on prepared images against a fixed validation patch set.
/// `on_epoch` sees every epoch record as it completes. The returned model
/// holds the parameters of the best validation epoch.
pub fn train_prepared(
    config: &TrainingConfig,
    mut model: AutoencoderModel,
    train_images: &[PreparedFrame],
    validation: &[Tensor],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(AutoencoderModel, TrainingHistory)> {
    config.validate()?;
    if train_images.is_empty() {
        return Err(TrainingError::EmptyTraining);
    }
    if validation.is_empty() {
        return Err(TrainingError::EmptyValidation);
    }
    let channels = model.config().input_channels;
    for f in train_images {
        if f.image.shape()[0] != channels {
            return Err(TrainingError::Channels {
                frame: format!("{:016x}", f.id),
                expected: channels,
                found: f.image.shape()[0],
            });
        }
    }
    let mut lr = config.initial_lr;
    let adam = AdamConfig {
        lr: lr as f32,
        ..AdamConfig::default()
    };
    let mut states: Vec<AdamState> = model
        .parameters()
        .iter()
        .map(|p| AdamState::new(p.value.shape(), adam))
        .collect();
    let mut history = TrainingHistory::new(config.improvement_threshold);
    let mut best_params: Option<Vec<Tensor>> = None;

    for epoch in 0..config.epochs() {
        let start = Instant::now();
        let samples = config.epoch_samples(epoch);
        for s in &mut states {
            s.config.lr = lr as f32;
        }
        let mut loss_sum = 0.0;
        for (batch_index, batch_start) in (0..samples).step_by(config.batch_size).enumerate() {
            let n = config.batch_size.min(samples - batch_start);
            let patches: Vec<Tensor> = par::map_range(n, |i| draw_patch(train_images, config.seed, epoch, batch_start + i));
            let chunks: Vec<&[Tensor]> = patches.chunks(CHUNK).collect();
            let results = par::map(&chunks, |c| chunk_gradients(&model, c, c.len() as f32 / n as f32));
            let mut total: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for (c, r) in chunks.iter().zip(results) {
                let (loss, grads) = r?;
                batch_loss += loss * c.len() as f64 / n as f64;
                match total.as_mut() {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainingError::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                });
            }
            loss_sum += batch_loss * n as f64;
            let grads = total.expect("batches are non-empty");
            for ((p, s), g) in model.parameters_mut().zip(&mut states).zip(&grads) {
                s.update(p, g)?;
            }
        }
        let val_loss = validate_patches(&model, validation)?;
        if !val_loss.is_finite() {
            return Err(TrainingError::NonFiniteValidation(epoch));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / samples as f64,
            val_loss,
            lr,
            seconds: start.elapsed().as_secs_f64(),
            samples,
        };
        history.push(record);
        if history.best_epoch == Some(epoch) {
            best_params = Some(model.parameters().iter().map(|p| p.value.clone()).collect());
        }
        on_epoch(&record);
        lr = plateau_schedule(&history, config.plateau_patience, config.plateau_factor);
    }

    if let Some(best) = best_params {
        for (p, b) in model.parameters_mut().zip(best) {
            *p = b;
        }
    }
    let best = history.best().expect("at least one epoch");
    model.metadata.epochs_seen += history.records.len() as u64;
    model.metadata.samples_seen += history.samples() as u64;
    model.metadata.final_validation_loss = best.val_loss as f32;
    model.provenance = serde_json::json!({
        "training": config,
        "best_epoch": history.best_epoch,
    })
    .to_string();
    Ok((model, history))
}
