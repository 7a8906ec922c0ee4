//! Frame-level scoring: a frame is downsampled, standardized, cut into
//! `N_p` random patches whose autoencoder scores are aggregated. Also the
//! per-frame threshold alarm used on ordered frame streams.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderModel;
use crate::par;
use crate::preprocessing::{self, extract_patch, sample_patch_coords, Frame, PreprocessError, Scale};
use crate::tensor::{Tensor, TensorError};

/// Patches per frame for sub-frame scales when not given explicitly.
pub const DEFAULT_PATCH_COUNT: usize = 250;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectorError {
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model expects {model} channels but frame {frame} has {found}")]
    ChannelMismatch {
        model: usize,
        found: usize,
        frame: String,
    },
    #[error("scale {scale} sees the whole frame as one patch; patch count must be 1, got {patch_count}")]
    WholeFramePatchCount { scale: Scale, patch_count: usize },
    #[error("patch count must be positive")]
    ZeroPatchCount,
    #[error("quantile must lie in (0, 1], got {0}")]
    InvalidQuantile(f64),
    #[error("cannot aggregate an empty score list")]
    EmptyScores,
    #[error("threshold calibration needs at least one validation frame")]
    EmptyValidation,
    #[error("percentile must lie in [0, 100], got {0}")]
    InvalidPercentile(f64),
    #[error("threshold must be a non-negative finite score, got {0}")]
    InvalidThreshold(f64),
}

pub type Result<T> = std::result::Result<T, DetectorError>;

/// How patch scores reduce to a frame score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Aggregation {
    Mean,
    /// Linear-interpolation quantile of the patch scores, `q` in `(0, 1]`.
    Quantile(f64),
}

impl Aggregation {
    pub fn validate(self) -> Result<()> {
        match self {
            Aggregation::Quantile(q) if !(q > 0.0 && q <= 1.0) => Err(DetectorError::InvalidQuantile(q)),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = String;
    /// `mean`, or `q0.75` / `quantile:0.75`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("mean") {
            return Ok(Aggregation::Mean);
        }
        let num = s
            .strip_prefix("quantile:")
            .or_else(|| s.strip_prefix('q'))
            .ok_or_else(|| format!("unknown aggregation {s:?} (expected mean or q<0..1>)"))?;
        let q: f64 = num.parse().map_err(|_| format!("bad quantile {num:?}"))?;
        let agg = Aggregation::Quantile(q);
        agg.validate().map_err(|e| e.to_string())?;
        Ok(agg)
    }
}

impl TryFrom<String> for Aggregation {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<Aggregation> for String {
    fn from(a: Aggregation) -> String {
        a.to_string()
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Aggregation::Mean => f.write_str("mean"),
            Aggregation::Quantile(q) => write!(f, "q{q}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub scale: Scale,
    pub patch_count: usize,
    pub aggregation: Aggregation,
    pub rng_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::for_scale(Scale::S8)
    }
}

impl DetectorConfig {
    /// Mean aggregation with the default patch count for `scale`.
    pub fn for_scale(scale: Scale) -> Self {
        Self {
            scale,
            patch_count: if scale.is_whole_frame() { 1 } else { DEFAULT_PATCH_COUNT },
            aggregation: Aggregation::Mean,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_count == 0 {
            return Err(DetectorError::ZeroPatchCount);
        }
        if self.scale.is_whole_frame() && self.patch_count != 1 {
            return Err(DetectorError::WholeFramePatchCount {
                scale: self.scale,
                patch_count: self.patch_count,
            });
        }
        self.aggregation.validate()
    }
}

/// Quantile with linear interpolation between order statistics: position
/// `h = (n - 1) q`, value `x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h])`.
pub fn quantile(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(DetectorError::EmptyScores);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(DetectorError::InvalidQuantile(q));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn aggregate(scores: &[f64], method: Aggregation) -> Result<f64> {
    if scores.is_empty() {
        return Err(DetectorError::EmptyScores);
    }
    match method {
        Aggregation::Mean => Ok(scores.iter().sum::<f64>() / scores.len() as f64),
        Aggregation::Quantile(q) => {
            method.validate()?;
            quantile(scores, q)
        }
    }
}

fn check_channels(model: &AutoencoderModel, frame: &Frame) -> Result<()> {
    let expected = model.config().input_channels;
    if frame.channels() != expected {
        return Err(DetectorError::ChannelMismatch {
            model: expected,
            found: frame.channels(),
            frame: frame.source_id.clone(),
        });
    }
    Ok(())
}

/// Patch scores of an already prepared (downsampled + standardized) image.
/// Patch positions depend only on the image size and the config seed.
pub fn prepared_patch_scores(model: &AutoencoderModel, image: &Tensor, config: &DetectorConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let coords = sample_patch_coords(h, w, config.patch_count, config.rng_seed)?;
    let patches = coords
        .into_iter()
        .map(|c| extract_patch(image, c))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(model.score_patches(&patches)?)
}

/// Individual patch scores of one frame, before aggregation.
pub fn frame_patch_scores(model: &AutoencoderModel, frame: &Frame, config: &DetectorConfig) -> Result<Vec<f64>> {
    config.validate()?;
    check_channels(model, frame)?;
    let image = preprocessing::prepare(frame, config.scale);
    prepared_patch_scores(model, &image, config)
}

pub fn frame_score(model: &AutoencoderModel, frame: &Frame, config: &DetectorConfig) -> Result<f64> {
    aggregate(&frame_patch_scores(model, frame, config)?, config.aggregation)
}

/// Scores of many frames, in input order.
pub fn score_frames(model: &AutoencoderModel, frames: &[Frame], config: &DetectorConfig) -> Result<Vec<f64>> {
    config.validate()?;
    par::map(frames, |f| frame_score(model, f, config))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub threshold: f64,
    pub detector: DetectorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub index: usize,
    pub score: f64,
    pub alarm: bool,
}

/// Threshold per-frame scores: `alarm = score > threshold`, no smoothing.
pub fn alarms(scores: &[f64], threshold: f64) -> Result<Vec<StreamRecord>> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(DetectorError::InvalidThreshold(threshold));
    }
    Ok(scores
        .iter()
        .enumerate()
        .map(|(index, &score)| StreamRecord {
            index,
            score,
            alarm: score > threshold,
        })
        .collect())
}

pub fn stream_detect(model: &AutoencoderModel, frames: &[Frame], config: &StreamConfig) -> Result<Vec<StreamRecord>> {
    if !(config.threshold >= 0.0 && config.threshold.is_finite()) {
        return Err(DetectorError::InvalidThreshold(config.threshold));
    }
    let scores = score_frames(model, frames, &config.detector)?;
    alarms(&scores, config.threshold)
}

/// One `index,score,alarm` line per record, score with 6 decimals and the
/// alarm as `0`/`1`.
pub fn write_stream_records(mut out: impl Write, records: &[StreamRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{},{:.6},{}", r.index, r.score, u8::from(r.alarm))?;
    }
    Ok(())
}

/// Maximal runs of `true` as half-open `[start, end)` index ranges.
pub fn intervals(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().chain(std::iter::once(&false)).enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Frame-level intersection over union of alarmed and truly anomalous
/// frames; 1 when both are empty.
pub fn alarm_iou(alarms: &[bool], truth: &[bool]) -> f64 {
    let inter = alarms.iter().zip(truth).filter(|(a, t)| **a && **t).count();
    let union = alarms.iter().zip(truth).filter(|(a, t)| **a || **t).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fraction of truly normal frames that raised an alarm; 0 when there are
/// none.
pub fn false_alarm_rate(alarms: &[bool], truth: &[bool]) -> f64 {
    let normal = truth.iter().filter(|t| !**t).count();
    let false_alarms = alarms.iter().zip(truth).filter(|(a, t)| **a && !**t).count();
    if normal == 0 {
        0.0
    } else {
        false_alarms as f64 / normal as f64
    }
}

/// `p`-th percentile (same interpolation as [`quantile`]) of scores.
pub fn percentile(scores: &[f64], p: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&p) {
        return Err(DetectorError::InvalidPercentile(p));
    }
    quantile(scores, p / 100.0)
}

/// Alarm threshold at the `p`-th percentile of validation frame scores.
pub fn calibrate_threshold(
    model: &AutoencoderModel,
    validation: &[Frame],
    config: &DetectorConfig,
    p: f64,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(DetectorError::EmptyValidation);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(DetectorError::InvalidPercentile(p));
    }
    percentile(&score_frames(model, validation, config)?, p)
}
