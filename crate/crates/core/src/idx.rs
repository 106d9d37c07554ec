//! IDX container parsing for the MNIST image and label files.
//!
//! Both files start with a big-endian magic number and big-endian extents;
//! the payload is raw unsigned bytes.

use alloc::vec::Vec;
use core::fmt;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: u32 = 28;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxErrorKind {
    WrongMagic { expected: u32, found: u32 },
    Truncated { needed: usize, available: usize },
    BadDimensions { rows: u32, cols: u32 },
    LabelOutOfRange(u8),
    TrailingBytes(usize),
}

/// Parse failure with the byte offset where it was detected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxError {
    pub offset: usize,
    pub kind: IdxErrorKind,
}

impl fmt::Display for IdxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IDX parse error at offset {}: ", self.offset)?;
        match &self.kind {
            IdxErrorKind::WrongMagic { expected, found } => {
                write!(f, "wrong magic {found:#010x}, expected {expected:#010x}")
            }
            IdxErrorKind::Truncated { needed, available } => {
                write!(f, "truncated: need {needed} bytes, {available} available")
            }
            IdxErrorKind::BadDimensions { rows, cols } => {
                write!(f, "image dims {rows}x{cols}, expected 28x28")
            }
            IdxErrorKind::LabelOutOfRange(l) => write!(f, "label {l} outside 0..9"),
            IdxErrorKind::TrailingBytes(n) => write!(f, "{n} unexpected trailing bytes"),
        }
    }
}

impl core::error::Error for IdxError {}

/// Raw images: `count` rows of 784 intensities, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub pixels: Vec<u8>,
}

impl RawImages {
    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * 784..(i + 1) * 784]
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IdxError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(IdxError {
                offset: self.pos,
                kind: IdxErrorKind::Truncated {
                    needed: n,
                    available,
                },
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32, IdxError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<(), IdxError> {
        let offset = self.pos;
        let found = self.u32_be()?;
        if found != expected {
            return Err(IdxError {
                offset,
                kind: IdxErrorKind::WrongMagic { expected, found },
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), IdxError> {
        let rest = self.bytes.len() - self.pos;
        if rest != 0 {
            return Err(IdxError {
                offset: self.pos,
                kind: IdxErrorKind::TrailingBytes(rest),
            });
        }
        Ok(())
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<RawImages, IdxError> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.magic(IMAGES_MAGIC)?;
    let count = cur.u32_be()? as usize;
    let dims_offset = cur.pos;
    let rows = cur.u32_be()?;
    let cols = cur.u32_be()?;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(IdxError {
            offset: dims_offset,
            kind: IdxErrorKind::BadDimensions { rows, cols },
        });
    }
    let pixels = cur.take(count * 784)?.to_vec();
    cur.finish()?;
    Ok(RawImages { count, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.magic(LABELS_MAGIC)?;
    let count = cur.u32_be()? as usize;
    let start = cur.pos;
    let labels = cur.take(count)?;
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(IdxError {
            offset: start + i,
            kind: IdxErrorKind::LabelOutOfRange(labels[i]),
        });
    }
    cur.finish()?;
    Ok(labels.to_vec())
}

/// Encodes raw images back into an IDX byte stream (used for fixtures).
pub fn write_idx_images(images: &RawImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, IMAGE_SIDE, IMAGE_SIDE] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
