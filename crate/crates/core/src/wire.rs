//! Framed binary encoding of the three protocol messages.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FLP1"
//!      4     1  version (1)
//!      5     1  variant (1 GlobalModel, 2 ClientUpdate, 3 JoinRequest)
//!      6     4  round          u32 LE
//!     10     2  client_id      u16 LE (0 = aggregator)
//!     12     4  sample_count   u32 LE (0 when absent)
//!     16     1  tensor_count   (4 with params, else 0)
//!     17     .  per tensor: ndim u8, ndim x u32 LE dims, f32 LE data
//!    L-4     4  CRC-32 (IEEE) of bytes 0..L-4, u32 LE
//! ```
//!
//! Tensors are always `w1, b1, w2, b2` with the fixed model shapes. The CRC
//! is checked before anything else, so any corruption reports as a CRC
//! mismatch.

use alloc::vec::Vec;
use core::fmt;

use crate::fedavg::ClientUpdate;
use crate::nn::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FLP1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 17;
pub const CRC_LEN: usize = 4;
/// Size of a frame without tensors (a join request).
pub const MIN_FRAME_LEN: usize = HEADER_LEN + CRC_LEN;

const VARIANT_GLOBAL: u8 = 1;
const VARIANT_UPDATE: u8 = 2;
const VARIANT_JOIN: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    /// Aggregator to all clients: the current round and global model.
    GlobalModel { round: u32, params: ModelParams },
    /// Client to aggregator: a locally trained model for `round`.
    ClientUpdate(ClientUpdate),
    /// Client to aggregator: request a re-broadcast of the current model.
    JoinRequest { client_id: u16 },
}

impl WireMessage {
    pub fn round(&self) -> u32 {
        match self {
            Self::GlobalModel { round, .. } => *round,
            Self::ClientUpdate(u) => u.round,
            Self::JoinRequest { .. } => 0,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::GlobalModel { .. } => "GlobalModel",
            Self::ClientUpdate(_) => "ClientUpdate",
            Self::JoinRequest { .. } => "JoinRequest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    Truncated { needed: usize, available: usize },
    CrcMismatch { stored: u32, computed: u32 },
    BadMagic([u8; 4]),
    UnsupportedVersion(u8),
    UnknownVariant(u8),
    TensorCount { variant: u8, found: u8 },
    ShapeMismatch { tensor: usize },
    ZeroSampleCount,
    TrailingBytes(usize),
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Truncated { needed, available } => {
                write!(f, "truncated frame: need {needed} bytes, have {available}")
            }
            Self::CrcMismatch { stored, computed } => {
                write!(
                    f,
                    "CRC mismatch: stored {stored:#010x}, computed {computed:#010x}"
                )
            }
            Self::BadMagic(m) => write!(f, "bad magic {m:02x?}"),
            Self::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            Self::UnknownVariant(v) => write!(f, "unknown message variant {v}"),
            Self::TensorCount { variant, found } => {
                write!(f, "variant {variant} cannot carry {found} tensors")
            }
            Self::ShapeMismatch { tensor } => {
                write!(f, "tensor {tensor} does not match the model shape")
            }
            Self::ZeroSampleCount => write!(f, "client update with zero samples"),
            Self::TrailingBytes(n) => write!(f, "{n} bytes between tensors and CRC"),
        }
    }
}

impl core::error::Error for DecodeError {}

/// Exact encoded size of a frame carrying params (407,129 bytes).
pub fn model_frame_len() -> usize {
    let tensors: usize = ModelParams::SHAPES
        .iter()
        .map(|s| 1 + 4 * s.len() + 4 * s.iter().product::<usize>())
        .sum();
    MIN_FRAME_LEN + tensors
}

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let (variant, round, client_id, sample_count, params) = match msg {
        WireMessage::GlobalModel { round, params } => (VARIANT_GLOBAL, *round, 0, 0, Some(params)),
        WireMessage::ClientUpdate(u) => (
            VARIANT_UPDATE,
            u.round,
            u.client_id,
            u.sample_count,
            Some(&u.params),
        ),
        WireMessage::JoinRequest { client_id } => (VARIANT_JOIN, 0, *client_id, 0, None),
    };
    let capacity = if params.is_some() {
        model_frame_len()
    } else {
        MIN_FRAME_LEN
    };
    let mut out = Vec::with_capacity(capacity);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(variant);
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&client_id.to_le_bytes());
    out.extend_from_slice(&sample_count.to_le_bytes());
    match params {
        None => out.push(0),
        Some(p) => {
            out.push(4);
            for t in p.tensors() {
                out.push(t.dims().len() as u8);
                for &d in t.dims() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let available = self.body.len() - self.pos;
        if available < n {
            return Err(DecodeError::Truncated {
                needed: self.pos + n + CRC_LEN,
                available: self.body.len() + CRC_LEN,
            });
        }
        let out = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self, index: usize, shape: &[usize]) -> Result<Tensor, DecodeError> {
        let ndim = self.u8()? as usize;
        if ndim != shape.len() {
            return Err(DecodeError::ShapeMismatch { tensor: index });
        }
        for &expected in shape {
            if self.u32()? as usize != expected {
                return Err(DecodeError::ShapeMismatch { tensor: index });
            }
        }
        let len: usize = shape.iter().product();
        let raw = self.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Tensor::new(shape.to_vec(), data).expect("length checked against shape"))
    }
}

/// Inverse of [`encode`]. Accepts arbitrary input and reports, never panics.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, DecodeError> {
    if bytes.len() < MIN_FRAME_LEN {
        return Err(DecodeError::Truncated {
            needed: MIN_FRAME_LEN,
            available: bytes.len(),
        });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(DecodeError::CrcMismatch { stored, computed });
    }

    let mut r = Reader { body, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(DecodeError::BadMagic([
            magic[0], magic[1], magic[2], magic[3],
        ]));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let variant = r.u8()?;
    if !(VARIANT_GLOBAL..=VARIANT_JOIN).contains(&variant) {
        return Err(DecodeError::UnknownVariant(variant));
    }
    let round = r.u32()?;
    let client_id = r.u16()?;
    let sample_count = r.u32()?;
    let tensor_count = r.u8()?;
    let expected_tensors = if variant == VARIANT_JOIN { 0 } else { 4 };
    if tensor_count != expected_tensors {
        return Err(DecodeError::TensorCount {
            variant,
            found: tensor_count,
        });
    }

    let params = if tensor_count == 4 {
        let mut tensors = Vec::with_capacity(4);
        for (i, shape) in ModelParams::SHAPES.iter().enumerate() {
            tensors.push(r.tensor(i, shape)?);
        }
        let [w1, b1, w2, b2]: [Tensor; 4] = tensors.try_into().expect("four tensors");
        Some(ModelParams { w1, b1, w2, b2 })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(DecodeError::TrailingBytes(body.len() - r.pos));
    }

    Ok(match (variant, params) {
        (VARIANT_GLOBAL, Some(params)) => WireMessage::GlobalModel { round, params },
        (VARIANT_UPDATE, Some(params)) => {
            if sample_count == 0 {
                return Err(DecodeError::ZeroSampleCount);
            }
            WireMessage::ClientUpdate(ClientUpdate {
                client_id,
                round,
                sample_count,
                params,
            })
        }
        _ => WireMessage::JoinRequest { client_id },
    })
}
