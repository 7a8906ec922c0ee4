//! The patch autoencoder.
//!
//! Encoder: four stride-2 3x3 convolutions with `F, 2F, 4F, 8F` filters
//! (64 -> 32 -> 16 -> 8 -> 4), flatten, dense to the `B`-wide bottleneck.
//! Decoder: dense expansion back to `8F x 4 x 4`, then four stride-2
//! transposed convolutions with `4F, 2F, F, C` filters (4 -> ... -> 64).
//! LeakyReLU(0.01) follows every layer except the linear output.

mod checkpoint;

pub use checkpoint::{load, save, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::par;
use crate::rng::{key, Stream};
use crate::tensor::{self, Graph, Result as TensorResult, Tensor, TensorError, Var};

pub const PATCH_EXTENT: usize = 64;
pub const ENCODER_LAYERS: usize = 4;
pub const LEAKY_SLOPE: f32 = 0.01;
/// Spatial extent at the bottleneck side of the convolution stack.
const CODE_EXTENT: usize = PATCH_EXTENT >> ENCODER_LAYERS;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("input extent must be {PATCH_EXTENT}, got {0}")]
    Extent(usize),
    #[error("first layer size and bottleneck size must be >= 1 (F={0}, B={1})")]
    Size(usize, usize),
    #[error("input channels must be 1 or 3, got {0}")]
    Channels(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub first_layer_size: usize,
    pub bottleneck_size: usize,
    pub input_channels: usize,
    pub input_extent: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            first_layer_size: 128,
            bottleneck_size: 16,
            input_channels: 1,
            input_extent: PATCH_EXTENT,
            seed: 0,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.input_extent != PATCH_EXTENT {
            return Err(ConfigError::Extent(self.input_extent));
        }
        if self.first_layer_size == 0 || self.bottleneck_size == 0 {
            return Err(ConfigError::Size(self.first_layer_size, self.bottleneck_size));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return Err(ConfigError::Channels(self.input_channels));
        }
        Ok(())
    }

    /// Filter counts of the encoder convolutions.
    pub fn encoder_filters(&self) -> [usize; ENCODER_LAYERS] {
        std::array::from_fn(|l| self.first_layer_size << l)
    }

    fn code_len(&self) -> usize {
        (self.first_layer_size << (ENCODER_LAYERS - 1)) * CODE_EXTENT * CODE_EXTENT
    }

    /// Names and shapes of all parameters, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let f = self.encoder_filters();
        let c = self.input_channels;
        let mut out = Vec::new();
        let mut c_in = c;
        for (l, &c_out) in f.iter().enumerate() {
            out.push((format!("enc{}.weight", l + 1), vec![c_out, c_in, 3, 3]));
            out.push((format!("enc{}.bias", l + 1), vec![c_out]));
            c_in = c_out;
        }
        let code = self.code_len();
        let b = self.bottleneck_size;
        out.push(("bottleneck.weight".into(), vec![b, code]));
        out.push(("bottleneck.bias".into(), vec![b]));
        out.push(("expand.weight".into(), vec![code, b]));
        out.push(("expand.bias".into(), vec![code]));
        let mut c_in = f[ENCODER_LAYERS - 1];
        for l in 0..ENCODER_LAYERS {
            let c_out = if l + 1 == ENCODER_LAYERS {
                c
            } else {
                f[ENCODER_LAYERS - 2 - l]
            };
            // Transposed-convolution kernels are stored [C_in, C_out, 3, 3].
            out.push((format!("dec{}.weight", l + 1), vec![c_in, c_out, 3, 3]));
            out.push((format!("dec{}.bias", l + 1), vec![c_out]));
            c_in = c_out;
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs_seen: u64,
    pub samples_seen: u64,
    /// Validation loss of the stored parameters; NaN when never validated.
    pub final_validation_loss: f32,
}

impl Default for TrainingMetadata {
    fn default() -> Self {
        Self {
            epochs_seen: 0,
            samples_seen: 0,
            final_validation_loss: f32::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParameter {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    config: AutoencoderConfig,
    params: Vec<NamedParameter>,
    pub metadata: TrainingMetadata,
    /// Free-form JSON describing how the model was produced.
    pub provenance: String,
}

impl AutoencoderModel {
    /// Fresh model with seeded He-uniform weights and zero biases.
    pub fn build(config: AutoencoderConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let layout = config.parameter_layout();
        let last_weight = layout.len() - 2;
        let params = layout
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in = if name.starts_with("dec") {
                        // each output of a stride-2 transposed conv sees ~C_in*9/4 inputs
                        (shape[0] * 9).div_ceil(4)
                    } else {
                        shape[1..].iter().product()
                    };
                    let mut bound = (6.0 / fan_in as f64).sqrt();
                    if i == last_weight {
                        // start close to the mean predictor
                        bound *= 0.1;
                    }
                    let mut s = Stream::new(key(&[config.seed, i as u64]));
                    Tensor::from_fn(shape, |_| s.range(-bound, bound) as f32)
                };
                NamedParameter { name, value }
            })
            .collect();
        Ok(Self {
            config,
            params,
            metadata: TrainingMetadata::default(),
            provenance: String::new(),
        })
    }

    pub(crate) fn from_parts(
        config: AutoencoderConfig,
        params: Vec<NamedParameter>,
        metadata: TrainingMetadata,
        provenance: String,
    ) -> Result<Self, String> {
        config.validate().map_err(|e| e.to_string())?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(format!(
                "expected {} parameter blocks, found {}",
                layout.len(),
                params.len()
            ));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    shape
                ));
            }
        }
        Ok(Self {
            config,
            params,
            metadata,
            provenance,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[NamedParameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Record the forward pass of a `[N, C, 64, 64]` batch on `g`, with the
    /// parameters registered as differentiable leaves. Returns
    /// `(reconstruction, bottleneck code, parameter vars)`.
    pub fn record<'a>(&'a self, g: &mut Graph<'a>, input: Var) -> TensorResult<(Var, Var, Vec<Var>)> {
        let vars: Vec<Var> = self.params.iter().map(|p| g.param(&p.value)).collect();
        let batch = g.value(input).shape()[0];
        let mut x = input;
        let mut next = vars.iter().copied();
        let mut take = || (next.next().unwrap(), next.next().unwrap());
        for _ in 0..ENCODER_LAYERS {
            let (w, b) = take();
            x = g.conv2d(x, w, b, 2, 1)?;
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
        let code_len = self.config.code_len();
        x = g.reshape(x, [batch, code_len])?;
        let (w, b) = take();
        let code = g.dense(x, w, b)?;
        x = g.leaky_relu(code, LEAKY_SLOPE);
        let (w, b) = take();
        x = g.dense(x, w, b)?;
        x = g.leaky_relu(x, LEAKY_SLOPE);
        let top = self.config.first_layer_size << (ENCODER_LAYERS - 1);
        x = g.reshape(x, [batch, top, CODE_EXTENT, CODE_EXTENT])?;
        for l in 0..ENCODER_LAYERS {
            let (w, b) = take();
            x = g.conv2d_transpose(x, w, b, 2, 1)?;
            if l + 1 < ENCODER_LAYERS {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        Ok((x, code, vars))
    }

    fn check_patches(&self, shape: &[usize]) -> TensorResult<()> {
        let c = self.config.input_channels;
        let ok = match shape {
            [n, ch, h, w] => *n > 0 && *ch == c && *h == PATCH_EXTENT && *w == PATCH_EXTENT,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op: "autoencoder",
                detail: format!("expected [N, {c}, {PATCH_EXTENT}, {PATCH_EXTENT}] patches, got {shape:?}"),
            })
        }
    }

    /// Reconstruct a batch `[N, C, 64, 64]`.
    pub fn forward_batch(&self, patches: &Tensor) -> TensorResult<Tensor> {
        self.check_patches(patches.shape())?;
        let mut g = Graph::new();
        let x = g.constant(patches);
        let (out, _, _) = self.record(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    /// Reconstruct one `[C, 64, 64]` patch.
    pub fn forward(&self, patch: &Tensor) -> TensorResult<Tensor> {
        let shape = patch.shape().to_vec();
        let batched = patch.clone().reshape(with_batch(&shape))?;
        self.check_patches(batched.shape())?;
        self.forward_batch(&batched)?.reshape(shape)
    }

    /// Bottleneck activations (before the LeakyReLU) of one patch.
    pub fn encode(&self, patch: &Tensor) -> TensorResult<Tensor> {
        let batched = patch.clone().reshape(with_batch(patch.shape()))?;
        self.check_patches(batched.shape())?;
        let mut g = Graph::new();
        let x = g.constant(&batched);
        let (_, code, _) = self.record(&mut g, x)?;
        g.value(code).clone().reshape([self.config.bottleneck_size])
    }

    /// MAE between a patch and its reconstruction.
    pub fn score_patch(&self, patch: &Tensor) -> TensorResult<f64> {
        let recon = self.forward(patch)?;
        tensor::mae(&recon, patch)
    }

    /// Patch scores of many `[C, 64, 64]` patches, fanned out across
    /// workers. Each patch runs as a batch of one so its score never
    /// depends on which other patches it was scored with.
    pub fn score_patches(&self, patches: &[Tensor]) -> TensorResult<Vec<f64>> {
        par::map(patches, |p| self.score_patch(p)).into_iter().collect()
    }
}

fn with_batch(shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(1);
    s.extend_from_slice(shape);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AutoencoderConfig {
        AutoencoderConfig {
            first_layer_size: 2,
            bottleneck_size: 3,
            ..Default::default()
        }
    }

    #[test]
    fn default_filter_counts_and_bottleneck() {
        let cfg = AutoencoderConfig::default();
        assert_eq!(cfg.encoder_filters(), [128, 256, 512, 1024]);
        let layout = cfg.parameter_layout();
        let bottleneck = layout.iter().find(|(n, _)| n == "bottleneck.weight").unwrap();
        assert_eq!(bottleneck.1, vec![16, 4 * 4 * 1024]);
    }

    #[test]
    fn config_validation() {
        assert!(AutoencoderConfig { input_extent: 32, ..small() }.validate().is_err());
        assert!(AutoencoderConfig { bottleneck_size: 0, ..small() }.validate().is_err());
        assert!(AutoencoderConfig { input_channels: 2, ..small() }.validate().is_err());
    }

    #[test]
    fn forward_preserves_shape_and_is_finite() {
        for channels in [1, 3] {
            let m = AutoencoderModel::build(AutoencoderConfig { input_channels: channels, ..small() }).unwrap();
            let mut s = Stream::new(channels as u64);
            let x = Tensor::from_fn([channels, 64, 64], |_| s.normal() as f32);
            let y = m.forward(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.is_finite());
            let z = m.forward(&Tensor::zeros([channels, 64, 64])).unwrap();
            assert!(z.is_finite());
        }
    }

    #[test]
    fn wrong_patch_shape_rejected() {
        let m = AutoencoderModel::build(small()).unwrap();
        assert!(m.forward(&Tensor::zeros([3, 64, 64])).is_err());
        assert!(m.forward(&Tensor::zeros([1, 32, 32])).is_err());
    }

    #[test]
    fn same_seed_same_scores() {
        let a = AutoencoderModel::build(small()).unwrap();
        let b = AutoencoderModel::build(small()).unwrap();
        let mut s = Stream::new(9);
        let x = Tensor::from_fn([1, 64, 64], |_| s.normal() as f32);
        assert_eq!(a.score_patch(&x).unwrap().to_bits(), b.score_patch(&x).unwrap().to_bits());
        let c = AutoencoderModel::build(AutoencoderConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.score_patch(&x).unwrap(), c.score_patch(&x).unwrap());
    }

    #[test]
    fn batched_scores_match_single() {
        let m = AutoencoderModel::build(small()).unwrap();
        let mut s = Stream::new(3);
        let patches: Vec<Tensor> = (0..5)
            .map(|_| Tensor::from_fn([1, 64, 64], |_| s.normal() as f32))
            .collect();
        let many = m.score_patches(&patches).unwrap();
        for (p, v) in patches.iter().zip(many) {
            assert_eq!(m.score_patch(p).unwrap(), v);
        }
    }
}
