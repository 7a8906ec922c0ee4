//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic               8 bytes  "HZDCKPT\0"
//! version             u32      = 1
//! first_layer_size    u32
//! bottleneck_size     u32
//! input_channels      u32
//! input_extent        u32
//! seed                u64
//! epochs_seen         u64
//! samples_seen        u64
//! final_val_loss      f32      (NaN when never validated)
//! provenance_len      u32
//! provenance          provenance_len bytes of UTF-8 JSON
//! param_count         u32
//! param_count times:
//!   name_len          u16
//!   name              name_len bytes of UTF-8
//!   rank              u8
//!   dims              rank x u32
//!   values            prod(dims) x f32
//! crc32               u32      CRC-32 (IEEE) of every preceding byte
//! ```

use std::path::Path;

use super::{AutoencoderConfig, AutoencoderModel, NamedParameter, TrainingMetadata};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"HZDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    NotACheckpoint,
    #[error("unsupported checkpoint version {found} (this build reads {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn to_bytes(model: &AutoencoderModel) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(64 + model.parameter_count() * 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.first_layer_size,
        cfg.bottleneck_size,
        cfg.input_channels,
        cfg.input_extent,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&model.metadata.epochs_seen.to_le_bytes());
    out.extend_from_slice(&model.metadata.samples_seen.to_le_bytes());
    out.extend_from_slice(&model.metadata.final_validation_loss.to_le_bytes());
    out.extend_from_slice(&(model.provenance.len() as u32).to_le_bytes());
    out.extend_from_slice(model.provenance.as_bytes());
    out.extend_from_slice(&(model.parameters().len() as u32).to_le_bytes());
    for p in model.parameters() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn string(&mut self, n: usize) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("string is not UTF-8".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<AutoencoderModel, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(CHECKPOINT_MAGIC.len()).map_err(|_| CheckpointError::NotACheckpoint)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::NotACheckpoint);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let config = AutoencoderConfig {
        first_layer_size: r.u32()? as usize,
        bottleneck_size: r.u32()? as usize,
        input_channels: r.u32()? as usize,
        input_extent: r.u32()? as usize,
        seed: r.u64()?,
    };
    let metadata = TrainingMetadata {
        epochs_seen: r.u64()?,
        samples_seen: r.u64()?,
        final_validation_loss: r.f32()?,
    };
    let prov_len = r.u32()? as usize;
    let provenance = r.string(prov_len)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        params.push(NamedParameter { name, value });
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after checksum",
            buf.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&buf[..body_end]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    AutoencoderModel::from_parts(config, params, metadata, provenance).map_err(CheckpointError::Malformed)
}

pub fn save(model: &AutoencoderModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<AutoencoderModel, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> AutoencoderModel {
        let mut m = AutoencoderModel::build(AutoencoderConfig {
            first_layer_size: 2,
            bottleneck_size: 4,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        m.metadata = TrainingMetadata {
            epochs_seen: 3,
            samples_seen: 12_345,
            final_validation_loss: 0.25,
        };
        m.provenance = r#"{"scale":8}"#.into();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.metadata.samples_seen, 12_345);
    }

    #[test]
    fn bad_magic() {
        let mut b = to_bytes(&model());
        b[0] = b'X';
        assert!(matches!(from_bytes(&b), Err(CheckpointError::NotACheckpoint)));
        assert!(matches!(from_bytes(b"HZ"), Err(CheckpointError::NotACheckpoint)));
    }

    #[test]
    fn version_mismatch() {
        let mut b = to_bytes(&model());
        b[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&b),
            Err(CheckpointError::UnsupportedVersion { found: 99 })
        ));
    }

    #[test]
    fn truncated() {
        let b = to_bytes(&model());
        for cut in [20, 60, b.len() / 2, b.len() - 2] {
            assert!(
                matches!(from_bytes(&b[..cut]), Err(CheckpointError::Truncated)),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let mut b = to_bytes(&model());
        let i = b.len() - 40;
        b[i] ^= 0x10;
        assert!(matches!(from_bytes(&b), Err(CheckpointError::ChecksumMismatch { .. })));
    }
}
