//! Procedural tunnel-like frames with four anomaly phenomenologies.
//!
//! A normal frame is a wall texture (layered value noise) lit by a spotlight
//! roughly coaxial with the camera, a darker striped floor band and a row of
//! bright ceiling fixtures at regular intervals. Anomalies:
//!
//! * `spot-small`: a few small high-contrast discs (well under 1% of pixels);
//! * `line-hanging`: thin dark curves hanging from the top edge;
//! * `haze-global`: every pixel pulled toward a broad bright veil, which
//!   flattens fine texture while adding large-scale structure;
//! * `tilt-defect`: the whole scene rendered under a large camera roll.
//!
//! Every frame is a pure function of `(config, split, sequence, index)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::preprocessing::{Frame, Label, FRAME_EXTENT};
use crate::rng::{key, mix64, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyClass {
    SpotSmall,
    LineHanging,
    HazeGlobal,
    TiltDefect,
}

impl AnomalyClass {
    pub const ALL: [AnomalyClass; 4] = [
        AnomalyClass::SpotSmall,
        AnomalyClass::LineHanging,
        AnomalyClass::HazeGlobal,
        AnomalyClass::TiltDefect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyClass::SpotSmall => "spot-small",
            AnomalyClass::LineHanging => "line-hanging",
            AnomalyClass::HazeGlobal => "haze-global",
            AnomalyClass::TiltDefect => "tilt-defect",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn label(self) -> Label {
        Label::Anomaly(self.name().to_string())
    }
}

impl std::fmt::Display for AnomalyClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureParams {
    /// Value-noise octaves layered into the wall texture.
    pub octaves: u32,
    /// Cycles across the frame of the coarsest octave.
    pub base_frequency: u32,
    /// Amplitude ratio between consecutive octaves.
    pub persistence: f64,
    /// Weight of the texture in the wall albedo.
    pub contrast: f64,
    /// Spotlight radius range, as a fraction of the frame side.
    pub spot_radius: (f64, f64),
    /// Light level far from the spotlight axis.
    pub ambient: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            octaves: 2,
            base_frequency: 128,
            persistence: 0.7,
            contrast: 0.55,
            spot_radius: (0.22, 0.38),
            ambient: 0.12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train_frames: usize,
    pub validation_frames: usize,
    pub test_frames: usize,
    pub qualitative_sequences: usize,
    pub sequence_length: usize,
    /// Fraction of the test split per anomaly class; the rest is normal.
    pub anomaly_mix: Vec<(AnomalyClass, f64)>,
    /// Classes of the anomalous intervals in each qualitative sequence, in
    /// temporal order.
    pub sequence_anomalies: Vec<AnomalyClass>,
    pub channels: usize,
    pub texture: TextureParams,
    /// Nominal rate of the qualitative sequences; frame `i` is at `i / rate` s.
    pub frame_rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_frames: 2000,
            validation_frames: 200,
            test_frames: 1000,
            qualitative_sequences: 2,
            sequence_length: 300,
            anomaly_mix: AnomalyClass::ALL.iter().map(|&c| (c, 0.1)).collect(),
            sequence_anomalies: vec![AnomalyClass::HazeGlobal, AnomalyClass::TiltDefect],
            channels: 1,
            texture: TextureParams::default(),
            frame_rate_hz: 30.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !matches!(self.channels, 1 | 3) {
            return Err(format!("channels must be 1 or 3, got {}", self.channels));
        }
        let total: f64 = self.anomaly_mix.iter().map(|m| m.1).sum();
        if self.anomaly_mix.iter().any(|m| !(m.1 >= 0.0)) || total > 1.0 + 1e-9 {
            return Err(format!("anomaly fractions must be >= 0 and sum to <= 1 (sum {total})"));
        }
        if self.texture.octaves == 0 || !self.texture.base_frequency.is_power_of_two() {
            return Err("texture needs at least one octave and a power-of-two base frequency".into());
        }
        if self.texture.octaves + self.texture.base_frequency.ilog2() > 12 {
            return Err("finest texture octave exceeds 4096 cycles per frame".into());
        }
        if self.qualitative_sequences > 0 && self.sequence_length < 5 * self.sequence_anomalies.len().max(1) {
            return Err("sequences are too short for their anomalous intervals".into());
        }
        Ok(())
    }

    /// Labels of the test split in frame order: per-class counts are the
    /// rounded fractions, shuffled with the seed.
    pub fn test_labels(&self) -> Vec<Option<AnomalyClass>> {
        let mut labels = Vec::with_capacity(self.test_frames);
        for &(class, frac) in &self.anomaly_mix {
            let n = (frac * self.test_frames as f64).round() as usize;
            let n = n.min(self.test_frames - labels.len());
            labels.extend(std::iter::repeat_n(Some(class), n));
        }
        labels.resize(self.test_frames, None);
        let mut s = Stream::new(key(&[self.seed, 0x7e57]));
        for i in (1..labels.len()).rev() {
            let j = s.below_incl(i);
            labels.swap(i, j);
        }
        labels
    }

    /// Anomalous intervals `[start, end)` of a qualitative sequence.
    pub fn sequence_intervals(&self) -> Vec<(usize, usize, AnomalyClass)> {
        let k = self.sequence_anomalies.len();
        let slot = self.sequence_length as f64 / (2 * k + 1) as f64;
        self.sequence_anomalies
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let start = (slot * (2 * i + 1) as f64).round() as usize;
                let end = (slot * (2 * i + 2) as f64).round() as usize;
                (start, end, c)
            })
            .collect()
    }

    pub fn sequence_label(&self, index: usize) -> Option<AnomalyClass> {
        self.sequence_intervals()
            .into_iter()
            .find(|&(s, e, _)| (s..e).contains(&index))
            .map(|(_, _, c)| c)
    }
}

/// Identifies one generated frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameKey {
    Train(usize),
    Validation(usize),
    Test(usize),
    Qualitative { sequence: usize, index: usize },
}

impl FrameKey {
    fn words(self) -> [u64; 3] {
        match self {
            FrameKey::Train(i) => [1, 0, i as u64],
            FrameKey::Validation(i) => [2, 0, i as u64],
            FrameKey::Test(i) => [3, 0, i as u64],
            FrameKey::Qualitative { sequence, index } => [4, sequence as u64, index as u64],
        }
    }

    /// Path relative to the dataset root.
    pub fn relative_path(self, ext: &str) -> String {
        match self {
            FrameKey::Train(i) => format!("train/frame_{i:06}.{ext}"),
            FrameKey::Validation(i) => format!("val/frame_{i:06}.{ext}"),
            FrameKey::Test(i) => format!("test/frame_{i:06}.{ext}"),
            FrameKey::Qualitative { sequence, index } => {
                format!("qual/seq{sequence:02}/frame_{index:06}.{ext}")
            }
        }
    }
}

/// A rendered frame with its 8-bit pixels and the anomaly bookkeeping.
#[derive(Debug, Clone)]
pub struct Rendered {
    /// Channel-planar 8-bit samples, `[C, 512, 512]`.
    pub bytes: Vec<u8>,
    pub channels: usize,
    pub anomaly: Option<AnomalyClass>,
    /// Pixels whose 8-bit value differs from the anomaly-free render.
    pub mask_pixels: usize,
}

impl Rendered {
    pub fn to_frame(&self, source_id: impl Into<String>) -> Frame {
        let data = self.bytes.iter().map(|&b| b as f32 / 255.0).collect();
        let pixels = Tensor::new([self.channels, FRAME_EXTENT, FRAME_EXTENT], data).expect("frame layout");
        let label = Some(self.anomaly.map_or(Label::Normal, AnomalyClass::label));
        Frame::new(pixels, source_id, label).expect("frame layout")
    }
}

/// Periodic value-noise lattice for one octave.
struct Lattice {
    freq: usize,
    values: Vec<f32>,
}

impl Lattice {
    fn new(freq: usize, seed: u64) -> Self {
        let mut s = Stream::new(seed);
        Self {
            freq,
            values: (0..freq * freq).map(|_| s.range(-1.0, 1.0) as f32).collect(),
        }
    }

    #[inline]
    fn sample(&self, u: f64, v: f64) -> f32 {
        let f = self.freq as f64;
        let (x, y) = (u * f, v * f);
        let (xf, yf) = (x.floor(), y.floor());
        let (tx, ty) = ((x - xf) as f32, (y - yf) as f32);
        // freq is a power of two, so masking wraps negative cells too
        let mask = self.freq as i64 - 1;
        let xi = (xf as i64 & mask) as usize;
        let yi = (yf as i64 & mask) as usize;
        let x1 = (xi + 1) & mask as usize;
        let y1 = (yi + 1) & mask as usize;
        let sx = tx * tx * (3.0 - 2.0 * tx);
        let sy = ty * ty * (3.0 - 2.0 * ty);
        let row0 = &self.values[yi * self.freq..];
        let row1 = &self.values[y1 * self.freq..];
        let a = row0[xi] + sx * (row0[x1] - row0[xi]);
        let b = row1[xi] + sx * (row1[x1] - row1[xi]);
        a + sy * (b - a)
    }
}

/// Per-frame scene parameters.
struct Scene {
    octaves: Vec<(Lattice, f32)>,
    norm: f32,
    contrast: f64,
    ambient: f64,
    spot: (f64, f64),
    spot_radius: f64,
    gain: f64,
    floor_y: f64,
    floor_phase: f64,
    fixture_y: f64,
    fixture_phase: f64,
    fixture_spacing: f64,
    tint: [f64; 3],
    /// Dark far end of the tunnel: center, radius, depth.
    far: (f64, f64),
    far_radius: f64,
    far_depth: f64,
}

impl Scene {
    fn sample(cfg: &SynthConfig, s: &mut Stream, texture_seed: u64) -> Self {
        let t = &cfg.texture;
        let mut amp = 1.0f32;
        let mut norm = 0.0f32;
        let octaves = (0..t.octaves)
            .map(|o| {
                let lat = Lattice::new(
                    (t.base_frequency as usize) << o,
                    mix64(texture_seed ^ (o as u64).wrapping_mul(0x9E37)),
                );
                let a = amp;
                norm += a;
                amp *= t.persistence as f32;
                (lat, a)
            })
            .collect();
        let tint = if cfg.channels == 3 {
            [1.0, s.range(0.85, 0.97), s.range(0.7, 0.88)]
        } else {
            [1.0; 3]
        };
        let spot = (0.5 + 0.07 * s.normal(), 0.47 + 0.07 * s.normal());
        Self {
            octaves,
            norm,
            contrast: t.contrast,
            ambient: t.ambient,
            spot,
            spot_radius: s.range(t.spot_radius.0, t.spot_radius.1),
            gain: s.range(0.85, 1.1),
            floor_y: s.range(0.76, 0.86),
            floor_phase: s.uniform(),
            fixture_y: 0.09,
            fixture_phase: s.uniform(),
            fixture_spacing: 0.26,
            tint,
            // the light is coaxial with the tunnel, so the far end sits near its axis
            far: (spot.0, spot.1 - 0.03),
            far_radius: s.range(0.06, 0.12),
            far_depth: s.range(0.5, 0.9),
        }
    }

    #[inline]
    fn texture(&self, u: f64, v: f64) -> f64 {
        let sum: f32 = self.octaves.iter().map(|(l, a)| a * l.sample(u, v)).sum();
        (sum / self.norm) as f64
    }

    #[inline]
    fn light(&self, u: f64, v: f64) -> f64 {
        let d2 = (u - self.spot.0).powi(2) + (v - self.spot.1).powi(2);
        let spot = self.ambient + (1.0 - self.ambient) * (-d2 / (2.0 * self.spot_radius.powi(2))).exp();
        let f2 = (u - self.far.0).powi(2) + (v - self.far.1).powi(2);
        spot * (1.0 - self.far_depth * (-f2 / (2.0 * self.far_radius.powi(2))).exp())
    }

    /// Intensity at scene coordinates in `[0, 1]^2` (before any veil).
    fn intensity(&self, u: f64, v: f64) -> f64 {
        let tex = self.texture(u, v);
        let mut albedo = 0.6 + self.contrast * tex;
        if v > self.floor_y {
            let stripes = (2.0 * PI * ((v - self.floor_y) * 8.0 + self.floor_phase)).sin();
            albedo = 0.35 + 0.1 * stripes + 0.3 * self.contrast * tex;
        }
        let mut value = self.gain * self.light(u, v) * albedo;
        let dy = (v - self.fixture_y) / 0.03;
        if dy.abs() < 1.0 {
            let fx = (u - self.fixture_phase) / self.fixture_spacing;
            let dx = ((fx - fx.floor()) - 0.2) / 0.2;
            if dx.abs() < 1.0 {
                let bump = |t: f64| 0.5 + 0.5 * (PI * t).cos();
                value += 0.6 * bump(dx) * bump(dy);
            }
        }
        value
    }
}

/// Large bright veil used by `haze-global`.
struct Veil {
    strength: f64,
    center: (f64, f64),
    sigma: (f64, f64),
    level: f64,
    /// Direction of the drift of the veil density across the frame.
    drift: (f64, f64),
}

impl Veil {
    fn sample(scene: &Scene, s: &mut Stream) -> Self {
        let angle = s.range(0.0, 2.0 * PI);
        Self {
            strength: s.range(0.75, 0.85),
            center: (scene.spot.0 + 0.05 * s.normal(), scene.spot.1 - s.range(0.12, 0.2)),
            sigma: (s.range(0.35, 0.5), s.range(0.14, 0.2)),
            level: s.range(0.45, 0.55),
            drift: (angle.cos(), angle.sin()),
        }
    }

    #[inline]
    fn glow(&self, u: f64, v: f64) -> f64 {
        let d = ((u - self.center.0) / self.sigma.0).powi(2) + ((v - self.center.1) / self.sigma.1).powi(2);
        let ramp = (2.0 * ((u - 0.5) * self.drift.0 + (v - 0.5) * self.drift.1)).clamp(-1.0, 1.0);
        self.level + 0.2 * (-0.5 * d).exp() + 0.25 * ramp
    }

    /// Blend the glow over the scene. The glow's spread is capped below the
    /// scene's so the veiled frame always has less contrast than the clean one.
    fn apply(&self, luminance: &mut [f64], glow: &[f64]) {
        let (_, scene_std) = mean_std(luminance);
        let (glow_mean, glow_std) = mean_std(glow);
        let squash = if glow_std > 0.0 { (0.9 * scene_std / glow_std).min(1.0) } else { 1.0 };
        for (l, &g) in luminance.iter_mut().zip(glow) {
            let g = glow_mean + squash * (g - glow_mean);
            *l = (1.0 - self.strength) * *l + self.strength * g;
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

struct Disc {
    cx: f64,
    cy: f64,
    r: f64,
}

struct Strand {
    x0: f64,
    length: f64,
    amplitude: f64,
    wavelength: f64,
    phase: f64,
    half_width: f64,
}

enum Overlay {
    None,
    Discs(Vec<Disc>),
    Strands(Vec<Strand>),
    Veil(Veil),
    Roll(f64),
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub struct Generator {
    config: SynthConfig,
}

impl Generator {
    pub fn new(config: SynthConfig) -> Result<Self, String> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    /// Every frame of the dataset with its label, split by split.
    pub fn plan(&self) -> Vec<(FrameKey, Option<AnomalyClass>)> {
        let c = &self.config;
        let mut out: Vec<(FrameKey, Option<AnomalyClass>)> = Vec::new();
        out.extend((0..c.train_frames).map(|i| (FrameKey::Train(i), None)));
        out.extend((0..c.validation_frames).map(|i| (FrameKey::Validation(i), None)));
        out.extend(
            c.test_labels()
                .into_iter()
                .enumerate()
                .map(|(i, l)| (FrameKey::Test(i), l)),
        );
        for sequence in 0..c.qualitative_sequences {
            out.extend(
                (0..c.sequence_length).map(|index| (FrameKey::Qualitative { sequence, index }, c.sequence_label(index))),
            );
        }
        out
    }

    /// Render one frame. Anomalous frames are also rendered anomaly-free to
    /// count the pixels the anomaly changed.
    pub fn render(&self, frame: FrameKey, anomaly: Option<AnomalyClass>) -> Rendered {
        let words = frame.words();
        let mut s = Stream::new(key(&[self.config.seed, words[0], words[1], words[2]]));
        let texture_seed = s.next_u64();
        let scene = Scene::sample(&self.config, &mut s, texture_seed);
        let mut a = Stream::new(key(&[self.config.seed, words[0], words[1], words[2], 0xa40a]));
        let overlay = match anomaly {
            None => Overlay::None,
            Some(AnomalyClass::SpotSmall) => Overlay::Discs(
                (0..6 + a.below_incl(6))
                    .map(|_| Disc {
                        cx: a.range(0.06, 0.94) * FRAME_EXTENT as f64,
                        cy: a.range(0.06, 0.94) * FRAME_EXTENT as f64,
                        r: a.range(4.0, 7.5),
                    })
                    .collect(),
            ),
            Some(AnomalyClass::LineHanging) => Overlay::Strands(
                (0..2 + a.below_incl(3))
                    .map(|_| Strand {
                        x0: a.range(0.1, 0.9),
                        length: a.range(0.25, 0.6),
                        amplitude: a.range(0.005, 0.03),
                        wavelength: a.range(0.1, 0.3),
                        phase: a.range(0.0, 2.0 * PI),
                        half_width: a.range(1.0, 1.8) / FRAME_EXTENT as f64,
                    })
                    .collect(),
            ),
            Some(AnomalyClass::HazeGlobal) => Overlay::Veil(Veil::sample(&scene, &mut a)),
            Some(AnomalyClass::TiltDefect) => {
                let angle = a.range(25.0, 60.0).to_radians();
                Overlay::Roll(if a.uniform() < 0.5 { -angle } else { angle })
            }
        };
        let clean = self.rasterize(&scene, &Overlay::None);
        let (bytes, mask_pixels) = match overlay {
            Overlay::None => (clean, 0),
            ref o => {
                let bytes = self.rasterize(&scene, o);
                let plane = FRAME_EXTENT * FRAME_EXTENT;
                let changed = (0..plane)
                    .filter(|&i| (0..self.config.channels).any(|c| bytes[c * plane + i] != clean[c * plane + i]))
                    .count();
                (bytes, changed)
            }
        };
        Rendered {
            bytes,
            channels: self.config.channels,
            anomaly,
            mask_pixels,
        }
    }

    fn rasterize(&self, scene: &Scene, overlay: &Overlay) -> Vec<u8> {
        let n = FRAME_EXTENT;
        let channels = self.config.channels;
        let mut luminance = vec![0.0f64; n * n];
        let mut glow = match overlay {
            Overlay::Veil(_) => vec![0.0f64; n * n],
            _ => Vec::new(),
        };
        let (sin, cos) = match overlay {
            Overlay::Roll(a) => a.sin_cos(),
            _ => (0.0, 1.0),
        };
        for y in 0..n {
            let v0 = (y as f64 + 0.5) / n as f64;
            for x in 0..n {
                let u0 = (x as f64 + 0.5) / n as f64;
                let (u, v) = if sin == 0.0 {
                    (u0, v0)
                } else {
                    let (du, dv) = (u0 - 0.5, v0 - 0.5);
                    (0.5 + cos * du - sin * dv, 0.5 + sin * du + cos * dv)
                };
                luminance[y * n + x] = scene.intensity(u, v);
                if let Overlay::Veil(veil) = overlay {
                    glow[y * n + x] = veil.glow(u, v);
                }
            }
        }
        match overlay {
            Overlay::Veil(veil) => veil.apply(&mut luminance, &glow),
            Overlay::Discs(discs) => {
                for d in discs {
                    let center = luminance[(d.cy as usize).min(n - 1) * n + (d.cx as usize).min(n - 1)];
                    let ink = if center < 0.5 { 1.0 } else { 0.0 };
                    let (y0, y1) = ((d.cy - d.r).floor().max(0.0) as usize, ((d.cy + d.r).ceil() as usize).min(n - 1));
                    let (x0, x1) = ((d.cx - d.r).floor().max(0.0) as usize, ((d.cx + d.r).ceil() as usize).min(n - 1));
                    for y in y0..=y1 {
                        for x in x0..=x1 {
                            let dist = ((x as f64 + 0.5 - d.cx).powi(2) + (y as f64 + 0.5 - d.cy).powi(2)).sqrt();
                            if dist <= d.r {
                                luminance[y * n + x] = ink;
                            }
                        }
                    }
                }
            }
            Overlay::Strands(strands) => {
                for st in strands {
                    let rows = (st.length * n as f64) as usize;
                    for y in 0..rows.min(n) {
                        let v = (y as f64 + 0.5) / n as f64;
                        let xc = st.x0 + st.amplitude * (2.0 * PI * v / st.wavelength + st.phase).sin();
                        let lo = ((xc - st.half_width) * n as f64).floor().max(0.0) as usize;
                        let hi = (((xc + st.half_width) * n as f64).ceil() as usize).min(n - 1);
                        for x in lo..=hi {
                            let u = (x as f64 + 0.5) / n as f64;
                            if (u - xc).abs() <= st.half_width {
                                luminance[y * n + x] = 0.03;
                            }
                        }
                    }
                }
            }
            _ => {}
        }
        let mut bytes = vec![0u8; channels * n * n];
        for (c, plane) in bytes.chunks_exact_mut(n * n).enumerate() {
            let tint = scene.tint[c];
            for (b, &l) in plane.iter_mut().zip(&luminance) {
                *b = quantize(l * tint);
            }
        }
        bytes
    }
}
