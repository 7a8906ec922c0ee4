//! Frame pipeline: block-average downsampling, per-channel standardization
//! and fully-contained random patch extraction.

use serde::{Deserialize, Serialize};

use crate::autoencoder::PATCH_EXTENT;
use crate::rng::{key, Stream};
use crate::tensor::Tensor;

/// Native frame resolution.
pub const FRAME_EXTENT: usize = 512;
/// Floor on the standard deviation used when standardizing.
pub const STD_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("scale must be one of 1, 2, 4, 8; got {0}")]
    InvalidScale(u32),
    #[error("frames must be {FRAME_EXTENT}x{FRAME_EXTENT} with 1 or 3 channels, got {0:?}")]
    FrameShape(Vec<usize>),
    #[error("image {height}x{width} is smaller than a {PATCH_EXTENT}x{PATCH_EXTENT} patch")]
    ImageTooSmall { height: usize, width: usize },
    #[error("patch at ({top}, {left}) does not fit in a {height}x{width} image")]
    PatchOutOfBounds {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    #[error("expected a [C, H, W] image, got {0:?}")]
    NotAnImage(Vec<usize>),
    #[error("patch count must be positive")]
    ZeroPatches,
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

/// Downsampling factor; the model trained at factor `s` is called `S_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Scale {
    S1,
    S2,
    S4,
    S8,
}

impl Scale {
    pub const ALL: [Scale; 4] = [Scale::S1, Scale::S2, Scale::S4, Scale::S8];

    pub fn factor(self) -> usize {
        match self {
            Scale::S1 => 1,
            Scale::S2 => 2,
            Scale::S4 => 4,
            Scale::S8 => 8,
        }
    }

    /// Side length of a downsampled frame.
    pub fn extent(self) -> usize {
        FRAME_EXTENT / self.factor()
    }

    /// Whether the downsampled frame is itself exactly one patch.
    pub fn is_whole_frame(self) -> bool {
        self.extent() == PATCH_EXTENT
    }
}

impl TryFrom<u32> for Scale {
    type Error = PreprocessError;
    fn try_from(s: u32) -> Result<Self> {
        match s {
            1 => Ok(Scale::S1),
            2 => Ok(Scale::S2),
            4 => Ok(Scale::S4),
            8 => Ok(Scale::S8),
            _ => Err(PreprocessError::InvalidScale(s)),
        }
    }
}

impl From<Scale> for u32 {
    fn from(s: Scale) -> u32 {
        s.factor() as u32
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "S{}", self.factor())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum Label {
    Normal,
    Anomaly(String),
}

impl Label {
    pub fn is_normal(&self) -> bool {
        matches!(self, Label::Normal)
    }

    pub fn as_str(&self) -> &str {
        match self {
            Label::Normal => "normal",
            Label::Anomaly(c) => c,
        }
    }
}

impl From<String> for Label {
    fn from(s: String) -> Self {
        if s == "normal" {
            Label::Normal
        } else {
            Label::Anomaly(s)
        }
    }
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Label::from(s.to_string())
    }
}

impl From<Label> for String {
    fn from(l: Label) -> String {
        l.as_str().to_string()
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A camera frame: `[C, 512, 512]` intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Tensor,
    pub source_id: String,
    pub label: Option<Label>,
}

impl Frame {
    pub fn new(pixels: Tensor, source_id: impl Into<String>, label: Option<Label>) -> Result<Self> {
        match *pixels.shape() {
            [1 | 3, FRAME_EXTENT, FRAME_EXTENT] => Ok(Self {
                pixels,
                source_id: source_id.into(),
                label,
            }),
            _ => Err(PreprocessError::FrameShape(pixels.shape().to_vec())),
        }
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchCoords {
    pub top: usize,
    pub left: usize,
    pub extent: usize,
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(PreprocessError::NotAnImage(image.shape().to_vec())),
    }
}

/// Average non-overlapping `s x s` blocks of a `[C, H, W]` image.
pub fn downsample_image(image: &Tensor, scale: Scale) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    let s = scale.factor();
    if s == 1 {
        return Ok(image.clone());
    }
    let (oh, ow) = (h / s, w / s);
    if oh == 0 || ow == 0 || h % s != 0 || w % s != 0 {
        return Err(PreprocessError::NotAnImage(image.shape().to_vec()));
    }
    let src = image.data();
    let mut out = vec![0.0f32; c * oh * ow];
    let inv = 1.0 / (s * s) as f64;
    for ch in 0..c {
        let plane = &src[ch * h * w..][..h * w];
        let dst = &mut out[ch * oh * ow..][..oh * ow];
        let mut acc = vec![0.0f64; ow];
        for oy in 0..oh {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for row in plane[oy * s * w..][..s * w].chunks_exact(w) {
                for (a, block) in acc.iter_mut().zip(row.chunks_exact(s)) {
                    *a += block.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            for (d, a) in dst[oy * ow..][..ow].iter_mut().zip(&acc) {
                *d = (a * inv) as f32;
            }
        }
    }
    Ok(Tensor::new([c, oh, ow], out).expect("extents are positive"))
}

/// Downsample a frame to `512/s x 512/s`.
pub fn downsample(frame: &Frame, scale: Scale) -> Tensor {
    downsample_image(frame.pixels(), scale).expect("frames are 512x512")
}

/// Per-channel zero mean, unit variance; constant channels become zero.
pub fn standardize(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    let plane = h * w;
    let mut out = image.clone();
    for ch in out.data_mut().chunks_exact_mut(plane).take(c) {
        let n = plane as f64;
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(STD_EPSILON);
        for v in ch.iter_mut() {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
    Ok(out)
}

/// Downsample then standardize: the image patches are drawn from.
pub fn prepare(frame: &Frame, scale: Scale) -> Tensor {
    standardize(&downsample(frame, scale)).expect("downsampled frames are images")
}

/// Draw `index` of the patch stream keyed by `key` for an `h x w` image.
pub fn patch_coords_at(height: usize, width: usize, stream_key: u64, index: u64) -> PatchCoords {
    let mut s = Stream::new(key(&[stream_key, index]));
    PatchCoords {
        top: s.below_incl(height - PATCH_EXTENT),
        left: s.below_incl(width - PATCH_EXTENT),
        extent: PATCH_EXTENT,
    }
}

/// `n` uniformly random fully-contained patch positions. Draw `i` depends
/// only on `(seed, i)`, so shorter lists are prefixes of longer ones.
pub fn sample_patch_coords(height: usize, width: usize, n: usize, rng_seed: u64) -> Result<Vec<PatchCoords>> {
    if height < PATCH_EXTENT || width < PATCH_EXTENT {
        return Err(PreprocessError::ImageTooSmall { height, width });
    }
    if n == 0 {
        return Err(PreprocessError::ZeroPatches);
    }
    Ok((0..n as u64)
        .map(|i| patch_coords_at(height, width, rng_seed, i))
        .collect())
}

/// Copy the `[C, 64, 64]` window at `coords`.
pub fn extract_patch(image: &Tensor, coords: PatchCoords) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    let e = coords.extent;
    if e == 0 || coords.top + e > h || coords.left + e > w {
        return Err(PreprocessError::PatchOutOfBounds {
            top: coords.top,
            left: coords.left,
            height: h,
            width: w,
        });
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * e * e);
    for ch in 0..c {
        for y in 0..e {
            let start = ch * h * w + (coords.top + y) * w + coords.left;
            out.extend_from_slice(&src[start..start + e]);
        }
    }
    Ok(Tensor::new([c, e, e], out).expect("positive extent"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_from(f: impl FnMut(usize) -> f32) -> Frame {
        Frame::new(Tensor::from_fn([1, 512, 512], f), "f", None).unwrap()
    }

    #[test]
    fn scale_parsing() {
        assert_eq!(Scale::try_from(8).unwrap(), Scale::S8);
        assert!(matches!(Scale::try_from(3), Err(PreprocessError::InvalidScale(3))));
        assert_eq!(Scale::S2.extent(), 256);
        assert!(Scale::S8.is_whole_frame());
    }

    #[test]
    fn frame_rejects_wrong_resolution() {
        assert!(Frame::new(Tensor::zeros([1, 256, 256]), "x", None).is_err());
        assert!(Frame::new(Tensor::zeros([2, 512, 512]), "x", None).is_err());
    }

    #[test]
    fn downsample_identity_and_extents() {
        let fr = frame_from(|i| (i % 97) as f32 / 97.0);
        assert_eq!(&downsample(&fr, Scale::S1), fr.pixels());
        for s in Scale::ALL {
            let d = downsample(&fr, s);
            assert_eq!(d.shape(), &[1, s.extent(), s.extent()]);
        }
        assert_eq!(downsample(&fr, Scale::S8).shape(), &[1, 64, 64]);
    }

    #[test]
    fn downsample_block_mean() {
        let img = Tensor::new([1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let d = downsample_image(&img, Scale::S2).unwrap();
        assert_eq!(d.data(), &[4.0]);
    }

    #[test]
    fn standardize_constant_channel_is_zero() {
        let img = Tensor::full([2, 4, 4], 0.7);
        let s = standardize(&img).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_coords_bounds_and_degenerate_case() {
        let c = sample_patch_coords(64, 64, 5, 1).unwrap();
        assert!(c.iter().all(|p| p.top == 0 && p.left == 0));
        let c = sample_patch_coords(128, 128, 500, 2).unwrap();
        assert!(c.iter().all(|p| p.top <= 64 && p.left <= 64));
        assert_eq!(c, sample_patch_coords(128, 128, 500, 2).unwrap());
        assert_eq!(&c[..10], &sample_patch_coords(128, 128, 10, 2).unwrap()[..]);
        assert!(sample_patch_coords(63, 128, 1, 0).is_err());
        assert!(sample_patch_coords(128, 128, 0, 0).is_err());
    }

    #[test]
    fn extract_whole_image_and_bounds() {
        let img = Tensor::from_fn([1, 64, 64], |i| i as f32);
        let p = extract_patch(&img, PatchCoords { top: 0, left: 0, extent: 64 }).unwrap();
        assert_eq!(p, img);
        assert!(extract_patch(&img, PatchCoords { top: 1, left: 0, extent: 64 }).is_err());
    }

    #[test]
    fn label_strings() {
        assert_eq!(Label::from("normal"), Label::Normal);
        assert_eq!(Label::from("haze-global").as_str(), "haze-global");
    }
}
