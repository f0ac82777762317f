//! Self-describing wire frame around a compressed message.
//!
//! Header layout (24 bytes, integers little-endian):
//!   byte 0      version = 1
//!   byte 1      compressor id (0 none, 1 fp16, 2 scaled_sign, 3 top_k,
//!               4 random_k, 5 linear_dither, 6 natural_dither)
//!   byte 2      flags: bit 0 value precision (0 f32 / 1 f16),
//!               bits 1-4 dither bits, rest zero
//!   byte 3      reserved = 0
//!   bytes 4-7   tensor id (u32)
//!   bytes 8-15  original element count d (u64)
//!   bytes 16-23 payload length in bytes (u64)
//! followed by the payload.

use super::{CompressedMessage, CompressorKind, SparseBudget, ValuePrecision};
use crate::error::{Error, Result};

pub const FRAME_HEADER_LEN: usize = 24;
const VERSION: u8 = 1;

fn kind_id(kind: &CompressorKind) -> u8 {
    match kind {
        CompressorKind::None => 0,
        CompressorKind::Fp16 => 1,
        CompressorKind::ScaledSign => 2,
        CompressorKind::TopK { .. } => 3,
        CompressorKind::RandomK { .. } => 4,
        CompressorKind::LinearDither { .. } => 5,
        CompressorKind::NaturalDither { .. } => 6,
    }
}

fn flags(kind: &CompressorKind) -> u8 {
    match kind {
        CompressorKind::TopK { precision, .. } | CompressorKind::RandomK { precision, .. } => {
            match precision {
                ValuePrecision::F32 => 0,
                ValuePrecision::F16 => 1,
            }
        }
        CompressorKind::LinearDither { bits } | CompressorKind::NaturalDither { bits } => bits << 1,
        _ => 0,
    }
}

/// Serialize a message for one tensor into its transport frame.
pub fn encode_frame(msg: &CompressedMessage, tensor_id: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + msg.payload.len());
    out.push(VERSION);
    out.push(kind_id(&msg.kind));
    out.push(flags(&msg.kind));
    out.push(0);
    out.extend_from_slice(&tensor_id.to_le_bytes());
    out.extend_from_slice(&(msg.original_len as u64).to_le_bytes());
    out.extend_from_slice(&(msg.payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&msg.payload);
    out
}

fn malformed(offset: usize, reason: impl Into<String>) -> Error {
    Error::MalformedPayload { offset, reason: reason.into() }
}

/// Parse a frame back into its tensor id and message, validating the
/// header and the declared lengths.
pub fn decode_frame(bytes: &[u8]) -> Result<(u32, CompressedMessage)> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(malformed(bytes.len(), "truncated frame header"));
    }
    if bytes[0] != VERSION {
        return Err(Error::UnknownVersion(bytes[0]));
    }
    let id = bytes[1];
    let flag = bytes[2];
    if bytes[3] != 0 {
        return Err(malformed(3, "nonzero reserved byte"));
    }
    let tensor_id = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let d = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if d == 0 {
        return Err(malformed(8, "zero element count"));
    }
    if bytes.len() != FRAME_HEADER_LEN + payload_len {
        return Err(malformed(
            16,
            format!(
                "frame length {} != header + declared payload {}",
                bytes.len(),
                FRAME_HEADER_LEN + payload_len
            ),
        ));
    }
    let payload = bytes[FRAME_HEADER_LEN..].to_vec();

    let precision = if flag & 1 == 1 { ValuePrecision::F16 } else { ValuePrecision::F32 };
    let dither_bits = (flag >> 1) & 0xF;
    if flag >> 5 != 0 {
        return Err(malformed(2, "nonzero high flag bits"));
    }
    let sparse_k = || -> Result<SparseBudget> {
        if payload.len() < 8 {
            return Err(malformed(FRAME_HEADER_LEN, "sparse payload missing k field"));
        }
        let k = u64::from_le_bytes(payload[..8].try_into().unwrap()) as usize;
        if k == 0 || k > d {
            return Err(malformed(FRAME_HEADER_LEN, format!("sparse k={k} invalid for d={d}")));
        }
        Ok(SparseBudget::Count(k))
    };
    let kind = match id {
        0 => CompressorKind::None,
        1 => CompressorKind::Fp16,
        2 => CompressorKind::ScaledSign,
        3 => CompressorKind::TopK { k: sparse_k()?, precision },
        4 => CompressorKind::RandomK { k: sparse_k()?, precision },
        5 => CompressorKind::LinearDither { bits: dither_bits },
        6 => CompressorKind::NaturalDither { bits: dither_bits },
        other => return Err(Error::UnknownCompressorId(other)),
    };
    match kind {
        CompressorKind::LinearDither { bits } | CompressorKind::NaturalDither { bits } => {
            if !(2..=8).contains(&bits) {
                return Err(malformed(2, format!("dither bits {bits} outside [2, 8]")));
            }
        }
        _ => {
            if dither_bits != 0 {
                return Err(malformed(2, "dither bits set on non-dither kind"));
            }
        }
    }
    if !matches!(kind, CompressorKind::TopK { .. } | CompressorKind::RandomK { .. })
        && flag & 1 != 0
    {
        return Err(malformed(2, "precision flag set on non-sparse kind"));
    }
    let expected = kind.payload_size(d)?;
    if payload.len() != expected {
        return Err(malformed(
            FRAME_HEADER_LEN,
            format!("payload length {} != expected {expected}", payload.len()),
        ));
    }
    Ok((tensor_id, CompressedMessage { kind, original_len: d, payload }))
}
