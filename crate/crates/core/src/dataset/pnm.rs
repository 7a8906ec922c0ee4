//! Binary PGM (`P5`) and PPM (`P6`) with maxval 255.

use std::fs;
use std::path::Path;

use super::{io_err, DatasetError, Result};

/// An 8-bit image with interleaved samples, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

impl PnmImage {
    /// From channel-planar samples `[C, H, W]`.
    pub fn from_planar(width: usize, height: usize, channels: usize, planar: &[u8]) -> Self {
        let plane = width * height;
        let mut samples = vec![0u8; planar.len()];
        for c in 0..channels {
            for i in 0..plane {
                samples[i * channels + c] = planar[c * plane + i];
            }
        }
        Self {
            width,
            height,
            channels,
            samples,
        }
    }

    /// Channel-planar copy of the samples.
    pub fn planar(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = vec![0u8; self.samples.len()];
        for c in 0..self.channels {
            for i in 0..plane {
                out[c * plane + i] = self.samples[i * self.channels + c];
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err("not a binary PGM/PPM file".into()),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err("truncated header".into()),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or("bad header number")?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err("missing whitespace after header".into());
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        let n = width * height * channels;
        let samples = bytes.get(pos..pos + n).ok_or("truncated pixel data")?.to_vec();
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<PnmImage> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    PnmImage::decode(&bytes).map_err(|detail| DatasetError::Decode {
        path: path.to_path_buf(),
        detail,
    })
}

pub fn write_pnm(path: impl AsRef<Path>, image: &PnmImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, image.encode()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_gray_and_color() {
        let gray = PnmImage {
            width: 3,
            height: 2,
            channels: 1,
            samples: vec![0, 1, 2, 253, 254, 255],
        };
        assert_eq!(PnmImage::decode(&gray.encode()).unwrap(), gray);
        let planar: Vec<u8> = (0..12).collect();
        let color = PnmImage::from_planar(2, 2, 3, &planar);
        assert_eq!(&color.samples[..3], &[0, 4, 8]);
        assert_eq!(color.planar(), planar);
        assert_eq!(PnmImage::decode(&color.encode()).unwrap(), color);
    }

    #[test]
    fn header_comments_and_errors() {
        let img = PnmImage::decode(b"P5 # c\n2 1\n# x\n255\n\x07\x08").unwrap();
        assert_eq!((img.width, img.height, img.samples), (2, 1, vec![7, 8]));
        assert!(PnmImage::decode(b"P2\n1 1\n255\n0").is_err());
        assert!(PnmImage::decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(PnmImage::decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
