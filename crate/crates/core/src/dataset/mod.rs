//! Dataset manifests, frame IO and the synthetic generator.
//!
//! A manifest is a text file made of `#`-prefixed JSON header lines followed
//! by a CSV table:
//!
//! ```text
//! # {"format":"hazard-manifest","version":1,"channels":1,"resolution":512,"classes":[...],"generator":{...}}
//! path,split,label,sequence,order,mask_pixels
//! train/frame_000000.pgm,train,normal,,,0
//! qual/seq00/frame_000042.pgm,qual,haze-global,seq00,42,261944
//! ```
//!
//! `split` is one of `train`, `val`, `test`, `qual`. `sequence` and `order`
//! are set exactly for `qual` rows. `mask_pixels` is optional: the number of
//! pixels an anomaly changed. Paths are relative to the manifest directory.
//! Images are binary PGM (`P5`, grayscale) or PPM (`P6`, RGB) with
//! maxval 255.

mod pnm;
mod synth;

pub use pnm::{read_pnm, write_pnm, PnmImage};
pub use synth::{AnomalyClass, FrameKey, Generator, Rendered, SynthConfig, TextureParams};

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::par;
use crate::preprocessing::{Frame, Label, FRAME_EXTENT};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_FORMAT: &str = "hazard-manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest references missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path} is in the {split} split but labeled {label}")]
    AnomalousNormalSplit { path: String, split: Split, label: String },
    #[error("{path} has unknown label {label:?}")]
    UnknownLabel { path: String, label: String },
    #[error("{0} appears more than once")]
    DuplicatePath(String),
    #[error("qualitative frame {0} lacks a sequence id or order")]
    MissingOrder(String),
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("cannot decode {path}: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("{path} is {width}x{height}, frames must be {FRAME_EXTENT}x{FRAME_EXTENT}")]
    Resolution { path: PathBuf, width: usize, height: usize },
    #[error("{path} has {found} channels, dataset has {expected}")]
    Channels { path: PathBuf, expected: usize, found: usize },
    #[error("invalid generator config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Validation,
    #[serde(rename = "test")]
    Test,
    #[serde(rename = "qual")]
    Qualitative,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Test, Split::Qualitative];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
            Split::Qualitative => "qual",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
    pub label: Label,
    pub sequence: Option<String>,
    pub order: Option<usize>,
    pub mask_pixels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    channels: usize,
    resolution: usize,
    classes: Vec<String>,
    #[serde(default)]
    generator: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory entry paths are relative to.
    pub root: PathBuf,
    pub channels: usize,
    pub resolution: usize,
    /// Known anomaly classes; any other non-normal label is rejected.
    pub classes: Vec<String>,
    /// Config that produced the dataset, if generated.
    pub generator: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Qualitative sequence ids in first-appearance order.
    pub fn sequences(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in self.split(Split::Qualitative) {
            if let Some(s) = &e.sequence {
                if !seen.contains(s) {
                    seen.push(s.clone());
                }
            }
        }
        seen
    }

    /// Frames of one qualitative sequence, sorted by order.
    pub fn sequence(&self, id: &str) -> Vec<&ManifestEntry> {
        let mut v: Vec<_> = self
            .split(Split::Qualitative)
            .filter(|e| e.sequence.as_deref() == Some(id))
            .collect();
        v.sort_by_key(|e| e.order);
        v
    }

    pub fn full_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Check the split contract. File existence is checked only when
    /// `check_files` is set.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        if !matches!(self.channels, 1 | 3) {
            return Err(DatasetError::Malformed(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.resolution != FRAME_EXTENT {
            return Err(DatasetError::Malformed(format!(
                "resolution must be {FRAME_EXTENT}, got {}",
                self.resolution
            )));
        }
        let mut paths = HashSet::new();
        for e in &self.entries {
            if !paths.insert(e.path.as_str()) {
                return Err(DatasetError::DuplicatePath(e.path.clone()));
            }
            if let Label::Anomaly(name) = &e.label {
                if !self.classes.iter().any(|c| c == name) {
                    return Err(DatasetError::UnknownLabel {
                        path: e.path.clone(),
                        label: name.clone(),
                    });
                }
                if matches!(e.split, Split::Train | Split::Validation) {
                    return Err(DatasetError::AnomalousNormalSplit {
                        path: e.path.clone(),
                        split: e.split,
                        label: name.clone(),
                    });
                }
            }
            if e.split == Split::Qualitative && (e.sequence.is_none() || e.order.is_none()) {
                return Err(DatasetError::MissingOrder(e.path.clone()));
            }
            if check_files && !self.full_path(e).is_file() {
                return Err(DatasetError::MissingFile(self.full_path(e)));
            }
        }
        Ok(())
    }

    pub fn to_writer(&self, mut out: impl Write) -> Result<()> {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            channels: self.channels,
            resolution: self.resolution,
            classes: self.classes.clone(),
            generator: self.generator.clone(),
        };
        let malformed = |e: &dyn std::fmt::Display| DatasetError::Malformed(e.to_string());
        let json = serde_json::to_string(&header).map_err(|e| malformed(&e))?;
        writeln!(out, "# {json}").map_err(|e| malformed(&e))?;
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e).map_err(|e| malformed(&e))?;
        }
        w.flush().map_err(|e| malformed(&e))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.to_writer(&mut buf)?;
        fs::write(path, buf).map_err(io_err(path))
    }

    /// Parse a manifest without touching the referenced files.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut header: Option<ManifestHeader> = None;
        let mut body = String::new();
        for line in BufReader::new(text.as_bytes()).lines() {
            let line = line.map_err(|e| DatasetError::Malformed(e.to_string()))?;
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if header.is_none() && rest.starts_with('{') {
                    header = Some(
                        serde_json::from_str(rest)
                            .map_err(|e| DatasetError::Malformed(format!("header: {e}")))?,
                    );
                }
            } else {
                body.push_str(&line);
                body.push('\n');
            }
        }
        let header = header.ok_or_else(|| DatasetError::Malformed("missing JSON header line".into()))?;
        if header.format != MANIFEST_FORMAT {
            return Err(DatasetError::Malformed(format!("unknown format {:?}", header.format)));
        }
        if header.version != MANIFEST_VERSION {
            return Err(DatasetError::Malformed(format!("unsupported version {}", header.version)));
        }
        let mut entries = Vec::new();
        for row in csv::Reader::from_reader(body.as_bytes()).deserialize() {
            entries.push(row.map_err(|e: csv::Error| DatasetError::Malformed(e.to_string()))?);
        }
        Ok(Self {
            root: root.into(),
            channels: header.channels,
            resolution: header.resolution,
            classes: header.classes,
            generator: header.generator,
            entries,
        })
    }
}

/// Read and fully validate a manifest, including that every file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = DatasetManifest::parse(&text, root)?;
    m.validate(true)?;
    Ok(m)
}

/// Convert 8-bit planar samples into a frame.
fn frame_from_bytes(bytes: &[u8], channels: usize, source_id: String, label: Option<Label>) -> Frame {
    let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    let pixels = Tensor::new([channels, FRAME_EXTENT, FRAME_EXTENT], data).expect("frame layout");
    Frame::new(pixels, source_id, label).expect("frame layout")
}

/// Decode one manifest entry into a frame with intensities in `[0, 1]`.
pub fn load_frame(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Frame> {
    let path = manifest.full_path(entry);
    let img = read_pnm(&path)?;
    if img.width != FRAME_EXTENT || img.height != FRAME_EXTENT {
        return Err(DatasetError::Resolution {
            path,
            width: img.width,
            height: img.height,
        });
    }
    if img.channels != manifest.channels {
        return Err(DatasetError::Channels {
            path,
            expected: manifest.channels,
            found: img.channels,
        });
    }
    Ok(frame_from_bytes(
        &img.planar(),
        img.channels,
        entry.path.clone(),
        Some(entry.label.clone()),
    ))
}

/// Load many entries concurrently, preserving order.
pub fn load_frames(manifest: &DatasetManifest, entries: &[&ManifestEntry]) -> Result<Vec<Frame>> {
    par::map(entries, |e| load_frame(manifest, e)).into_iter().collect()
}

pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Frame>> {
    let entries: Vec<_> = manifest.split(split).collect();
    load_frames(manifest, &entries)
}

fn split_of(key: FrameKey) -> (Split, Option<String>, Option<usize>) {
    match key {
        FrameKey::Train(_) => (Split::Train, None, None),
        FrameKey::Validation(_) => (Split::Validation, None, None),
        FrameKey::Test(_) => (Split::Test, None, None),
        FrameKey::Qualitative { sequence, index } => (Split::Qualitative, Some(format!("seq{sequence:02}")), Some(index)),
    }
}

/// Render every frame of `config` under `out` and write the manifest last.
pub fn generate_synthetic(config: &SynthConfig, out: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out = out.as_ref();
    let generator = Generator::new(config.clone()).map_err(DatasetError::Config)?;
    let plan = generator.plan();
    let ext = if config.channels == 1 { "pgm" } else { "ppm" };
    let mut dirs: Vec<PathBuf> = vec![out.join("train"), out.join("val"), out.join("test")];
    dirs.extend((0..config.qualitative_sequences).map(|s| out.join(format!("qual/seq{s:02}"))));
    for d in &dirs {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let written = par::map(&plan, |&(key, anomaly)| -> Result<ManifestEntry> {
        let r = generator.render(key, anomaly);
        let rel = key.relative_path(ext);
        let img = PnmImage::from_planar(FRAME_EXTENT, FRAME_EXTENT, r.channels, &r.bytes);
        write_pnm(out.join(&rel), &img)?;
        let (split, sequence, order) = split_of(key);
        Ok(ManifestEntry {
            path: rel,
            split,
            label: anomaly.map_or(Label::Normal, AnomalyClass::label),
            sequence,
            order,
            mask_pixels: Some(r.mask_pixels),
        })
    });
    let entries = written.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        channels: config.channels,
        resolution: FRAME_EXTENT,
        classes: AnomalyClass::ALL.iter().map(|c| c.name().to_string()).collect(),
        generator: serde_json::to_value(config).map_err(|e| DatasetError::Config(e.to_string()))?,
        entries,
    };
    manifest.validate(false)?;
    manifest.save(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
