//! Payload encoders and decoders.
//!
//! Layouts (all integers little-endian):
//!   none:          d x f32
//!   fp16:          d x binary16 (round-to-nearest-even)
//!   scaled_sign:   f32 scale, then ceil(d/8) sign bytes, LSB-first,
//!                  bit = 1 meaning nonnegative
//!   top_k/random_k: u64 k, k strictly increasing u32 indices, k values
//!                  (f32 or f16); random_k values pre-scaled by d/k
//!   dither:        f32 l2 norm, then d codes of `bits` bits, LSB-first;
//!                  code = sign bit (1 = nonnegative) in bit 0, level or
//!                  exponent field above it

use super::{CompressedMessage, CompressorKind, ValuePrecision};
use crate::error::{Error, Result};
use crate::exec::{self, Execution, CHUNK};
use crate::rng::DeterministicRng;
use crate::vector::GradientVector;
use half::f16;

fn malformed(offset: usize, reason: impl Into<String>) -> Error {
    Error::MalformedPayload { offset, reason: reason.into() }
}

pub(super) fn encode(
    kind: CompressorKind,
    x: &GradientVector,
    rng: &DeterministicRng,
    exec: Execution,
) -> Result<Vec<u8>> {
    let d = x.len();
    let xs = x.as_slice();
    match kind {
        CompressorKind::None => {
            let mut out = vec![0u8; 4 * d];
            exec::for_byte_chunks(&mut out, 4 * CHUNK, exec, |i, chunk| {
                let base = i * CHUNK;
                for (o, v) in chunk.chunks_exact_mut(4).zip(&xs[base..]) {
                    o.copy_from_slice(&v.to_le_bytes());
                }
            });
            Ok(out)
        }
        CompressorKind::Fp16 => {
            let mut out = vec![0u8; 2 * d];
            exec::for_byte_chunks(&mut out, 2 * CHUNK, exec, |i, chunk| {
                let base = i * CHUNK;
                for (o, v) in chunk.chunks_exact_mut(2).zip(&xs[base..]) {
                    o.copy_from_slice(&f16::from_f32(*v).to_le_bytes());
                }
            });
            Ok(out)
        }
        CompressorKind::ScaledSign => {
            let scale = (x.l1_norm_with(exec) / d as f64) as f32;
            let mut out = vec![0u8; 4 + d.div_ceil(8)];
            out[..4].copy_from_slice(&scale.to_le_bytes());
            exec::for_byte_chunks(&mut out[4..], CHUNK / 8, exec, |i, chunk| {
                let base = i * CHUNK;
                for (local, v) in xs[base..(base + CHUNK).min(d)].iter().enumerate() {
                    if *v >= 0.0 {
                        chunk[local / 8] |= 1 << (local % 8);
                    }
                }
            });
            Ok(out)
        }
        CompressorKind::TopK { k, precision } => {
            let k = k.resolve(d)?;
            let indices = top_k_indices(xs, k, exec);
            encode_sparse(xs, &indices, 1.0, precision)
        }
        CompressorKind::RandomK { k, precision } => {
            let k = k.resolve(d)?;
            let mut rng = *rng;
            let indices = floyd_sample(d, k, &mut rng);
            encode_sparse(xs, &indices, d as f64 / k as f64, precision)
        }
        CompressorKind::LinearDither { bits } => encode_dither(xs, bits, rng, exec, false),
        CompressorKind::NaturalDither { bits } => encode_dither(xs, bits, rng, exec, true),
    }
}

pub(super) fn decode(msg: &CompressedMessage, exec: Execution) -> Result<GradientVector> {
    let d = msg.original_len;
    if d == 0 {
        return Err(malformed(0, "zero-length message"));
    }
    let expected = msg.kind.payload_size(d)?;
    if msg.payload.len() != expected {
        return Err(malformed(
            0,
            format!("payload length {} != expected {expected}", msg.payload.len()),
        ));
    }
    let p = &msg.payload[..];
    let values = match msg.kind {
        CompressorKind::None => {
            let mut out = vec![0f32; d];
            exec::for_f32_chunks(&mut out, CHUNK, exec, |i, chunk| {
                let base = i * CHUNK * 4;
                for (local, o) in chunk.iter_mut().enumerate() {
                    let at = base + 4 * local;
                    *o = f32::from_le_bytes(p[at..at + 4].try_into().unwrap());
                }
            });
            out
        }
        CompressorKind::Fp16 => {
            let mut out = vec![0f32; d];
            exec::for_f32_chunks(&mut out, CHUNK, exec, |i, chunk| {
                let base = i * CHUNK * 2;
                for (local, o) in chunk.iter_mut().enumerate() {
                    let at = base + 2 * local;
                    *o = f16::from_le_bytes(p[at..at + 2].try_into().unwrap()).to_f32();
                }
            });
            out
        }
        CompressorKind::ScaledSign => {
            let scale = read_scale(p, 0)?;
            let bytes = &p[4..];
            let mut out = vec![0f32; d];
            exec::for_f32_chunks(&mut out, CHUNK, exec, |i, chunk| {
                let base = i * CHUNK;
                for (local, o) in chunk.iter_mut().enumerate() {
                    let j = base + local;
                    let positive = bytes[j / 8] >> (j % 8) & 1 == 1;
                    *o = if positive { scale } else { -scale };
                }
            });
            // Trailing bits past d must be zero (canonical form).
            if d % 8 != 0 && bytes[d / 8] >> (d % 8) != 0 {
                return Err(malformed(4 + d / 8, "nonzero sign padding"));
            }
            out
        }
        CompressorKind::TopK { .. } | CompressorKind::RandomK { .. } => {
            return decode_sparse(msg);
        }
        CompressorKind::LinearDither { bits } => decode_dither(p, d, bits, exec, false)?,
        CompressorKind::NaturalDither { bits } => decode_dither(p, d, bits, exec, true)?,
    };
    GradientVector::new(values)
        .map_err(|e| malformed(0, format!("decoded non-finite value: {e}")))
}

/// Selected indices of a sparse message, validated (strictly increasing,
/// in range). O(k) — used by the fused residual path.
pub(super) fn sparse_indices(msg: &CompressedMessage) -> Result<Vec<u32>> {
    let d = msg.original_len;
    let p = &msg.payload[..];
    if p.len() < 8 {
        return Err(malformed(0, "sparse payload shorter than its k field"));
    }
    let k = u64::from_le_bytes(p[..8].try_into().unwrap()) as usize;
    let declared = match msg.kind {
        CompressorKind::TopK { k, .. } | CompressorKind::RandomK { k, .. } => k.resolve(d)?,
        _ => {
            return Err(Error::UnsupportedKind {
                op: "sparse_indices",
                kind: msg.kind.name().into(),
            })
        }
    };
    if k != declared {
        return Err(malformed(0, format!("payload k={k} != declared k={declared}")));
    }
    if p.len() < 8 + 4 * k {
        return Err(malformed(8, "sparse payload shorter than its index block"));
    }
    let mut indices = Vec::with_capacity(k);
    let mut prev: i64 = -1;
    for i in 0..k {
        let at = 8 + 4 * i;
        let idx = u32::from_le_bytes(p[at..at + 4].try_into().unwrap());
        if (idx as usize) >= d {
            return Err(malformed(at, format!("index {idx} out of range for d={d}")));
        }
        if (idx as i64) <= prev {
            return Err(malformed(at, format!("indices not strictly increasing at {idx}")));
        }
        prev = idx as i64;
        indices.push(idx);
    }
    Ok(indices)
}

fn decode_sparse(msg: &CompressedMessage) -> Result<GradientVector> {
    let d = msg.original_len;
    let indices = sparse_indices(msg)?;
    let k = indices.len();
    let precision = match msg.kind {
        CompressorKind::TopK { precision, .. } | CompressorKind::RandomK { precision, .. } => {
            precision
        }
        _ => unreachable!("decode_sparse is only called for sparse kinds"),
    };
    let p = &msg.payload[..];
    let values_at = 8 + 4 * k;
    let mut out = vec![0f32; d];
    for (i, idx) in indices.iter().enumerate() {
        let v = match precision {
            ValuePrecision::F32 => {
                let at = values_at + 4 * i;
                f32::from_le_bytes(p[at..at + 4].try_into().unwrap())
            }
            ValuePrecision::F16 => {
                let at = values_at + 2 * i;
                f16::from_le_bytes(p[at..at + 2].try_into().unwrap()).to_f32()
            }
        };
        if !v.is_finite() {
            return Err(malformed(values_at + i, "non-finite sparse value"));
        }
        out[*idx as usize] = v;
    }
    GradientVector::new(out).map_err(|e| malformed(0, e.to_string()))
}

fn encode_sparse(
    xs: &[f32],
    indices: &[u32],
    scale: f64,
    precision: ValuePrecision,
) -> Result<Vec<u8>> {
    let k = indices.len();
    let value_bytes = match precision {
        ValuePrecision::F32 => 4,
        ValuePrecision::F16 => 2,
    };
    let mut out = Vec::with_capacity(8 + k * (4 + value_bytes));
    out.extend_from_slice(&(k as u64).to_le_bytes());
    for idx in indices {
        out.extend_from_slice(&idx.to_le_bytes());
    }
    for idx in indices {
        let v = xs[*idx as usize] as f64 * scale;
        match precision {
            ValuePrecision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            ValuePrecision::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
        }
    }
    Ok(out)
}

/// Indices of the `k` largest-magnitude entries, ties broken toward the
/// lower index, returned in ascending index order.
///
/// The comparison (magnitude desc, index asc) is a strict total order, so
/// the selected set is unique; the parallel path only changes how the
/// candidate pool is gathered, never the winners.
fn top_k_indices(xs: &[f32], k: usize, exec: Execution) -> Vec<u32> {
    let d = xs.len();
    let rank = |a: &u32, b: &u32| {
        xs[*b as usize]
            .abs()
            .partial_cmp(&xs[*a as usize].abs())
            .expect("finite by construction")
            .then(a.cmp(b))
    };
    let mut pool: Vec<u32> = if k == d {
        (0..d as u32).collect()
    } else {
        match exec {
            Execution::Sequential => {
                let mut idxs: Vec<u32> = (0..d as u32).collect();
                idxs.select_nth_unstable_by(k - 1, rank);
                idxs.truncate(k);
                idxs
            }
            Execution::Parallel => {
                // Per-chunk winners form a superset of the global winners.
                let mut candidates: Vec<u32> = exec::map_chunks(d, exec, |_, range| {
                    let mut idxs: Vec<u32> = (range.start as u32..range.end as u32).collect();
                    if k < idxs.len() {
                        idxs.select_nth_unstable_by(k - 1, rank);
                        idxs.truncate(k);
                    }
                    idxs
                })
                .concat();
                if k < candidates.len() {
                    candidates.select_nth_unstable_by(k - 1, rank);
                    candidates.truncate(k);
                }
                candidates
            }
        }
    };
    pool.sort_unstable();
    pool
}

/// Floyd's uniform k-subset sampler; draws consume the stream
/// sequentially, so the whole message owns its stream.
fn floyd_sample(d: usize, k: usize, rng: &mut DeterministicRng) -> Vec<u32> {
    let mut chosen = std::collections::HashSet::with_capacity(k);
    for j in (d - k)..d {
        let t = rng.next_range(j as u64 + 1) as u32;
        if !chosen.insert(t) {
            chosen.insert(j as u32);
        }
    }
    let mut indices: Vec<u32> = chosen.into_iter().collect();
    indices.sort_unstable();
    indices
}

fn encode_dither(
    xs: &[f32],
    bits: u8,
    rng: &DeterministicRng,
    exec: Execution,
    natural: bool,
) -> Result<Vec<u8>> {
    let d = xs.len();
    let norm = {
        let sq = exec::sum_chunked(d, exec, |j| {
            let v = xs[j] as f64;
            v * v
        });
        sq.sqrt() as f32
    };
    let bits_us = bits as usize;
    let mut out = vec![0u8; 4 + (d * bits_us).div_ceil(8)];
    out[..4].copy_from_slice(&norm.to_le_bytes());
    if norm == 0.0 {
        return Ok(out); // all-zero codes decode to zeros
    }
    let norm_f64 = norm as f64;
    let levels = (1u32 << (bits - 1)) - 1; // linear: grid size s; natural: max field
    exec::for_byte_chunks(&mut out[4..], CHUNK / 8 * bits_us, exec, |i, chunk| {
        let base = i * CHUNK;
        for (local, v) in xs[base..(base + CHUNK).min(d)].iter().enumerate() {
            let j = base + local;
            let u = ((v.abs() as f64) / norm_f64).min(1.0);
            let field = if natural {
                natural_field(u, levels, rng.f64_at(j as u64))
            } else {
                linear_field(u, levels, rng.f64_at(j as u64))
            };
            let code = ((*v >= 0.0) as u32) | (field << 1);
            let bitpos = local * bits_us;
            for b in 0..bits_us {
                if code >> b & 1 == 1 {
                    chunk[(bitpos + b) / 8] |= 1 << ((bitpos + b) % 8);
                }
            }
        }
    });
    Ok(out)
}

/// Stochastically round `u in [0,1]` onto `{0, 1/s, .., 1}` so the
/// expectation is exact: up with probability equal to the fractional part
/// of `u * s`.
fn linear_field(u: f64, s: u32, draw: f64) -> u32 {
    let t = u * s as f64;
    let q = t.floor();
    let frac = t - q;
    let mut level = q as u32;
    if level >= s {
        return s;
    }
    if draw < frac {
        level += 1;
    }
    level
}

/// Stochastically round `u in [0,1]` onto `{0} ∪ {2^-i}`. Field 0 is the
/// zero level; field f >= 1 is the level `2^-(f-1)`. `max_field` is
/// `2^(bits-1) - 1`, i.e. the smallest representable level is
/// `2^-(max_field-1)`.
fn natural_field(u: f64, max_field: u32, draw: f64) -> u32 {
    if u <= 0.0 {
        return 0;
    }
    if u >= 1.0 {
        return 1; // level 2^0
    }
    let max_exp = max_field - 1;
    let smallest = (-(max_exp as f64)).exp2();
    if u <= smallest {
        // Bracket [0, 2^-max_exp].
        return if draw < u / smallest { max_field } else { 0 };
    }
    // u in (2^-max_exp, 1): extract floor(log2 u) exactly from the bits.
    let raw = u.to_bits();
    let exp = ((raw >> 52) & 0x7FF) as i32 - 1023; // negative here
    let mantissa = raw & 0xF_FFFF_FFFF_FFFF;
    let i_lo = (-exp) as u32; // u in [2^-i_lo, 2^-(i_lo-1))
    if mantissa == 0 {
        return i_lo + 1; // exact power of two: grid point
    }
    // Up-probability (u - lo)/(hi - lo) with lo = 2^exp, hi = 2^(exp+1)
    // collapses to the mantissa fraction of u.
    let p_up = u / exp2_i(exp) - 1.0;
    if draw < p_up {
        i_lo // level 2^-(i_lo - 1)
    } else {
        i_lo + 1 // level 2^-i_lo
    }
}

fn exp2_i(e: i32) -> f64 {
    f64::from_bits(((e + 1023) as u64) << 52)
}

fn decode_dither(
    p: &[u8],
    d: usize,
    bits: u8,
    exec: Execution,
    natural: bool,
) -> Result<Vec<f32>> {
    let norm = read_scale(p, 0)? as f64;
    let bits_us = bits as usize;
    let codes = &p[4..];
    // Padding bits past the last code must be zero.
    let used_bits = d * bits_us;
    if used_bits % 8 != 0 {
        let last = codes[used_bits / 8];
        if last >> (used_bits % 8) != 0 {
            return Err(malformed(4 + used_bits / 8, "nonzero code padding"));
        }
    }
    let s = (1u32 << (bits - 1)) - 1;
    let mut out = vec![0f32; d];
    exec::for_f32_chunks(&mut out, CHUNK, exec, |i, chunk| {
        let base = i * CHUNK;
        for (local_out, o) in chunk.iter_mut().enumerate() {
            let j = base + local_out;
            let bitpos = j * bits_us;
            let mut code = 0u32;
            for b in 0..bits_us {
                code |= ((codes[(bitpos + b) / 8] >> ((bitpos + b) % 8) & 1) as u32) << b;
            }
            let sign = if code & 1 == 1 { 1.0 } else { -1.0 };
            let field = code >> 1;
            let level = if natural {
                if field == 0 { 0.0 } else { exp2_i(-((field - 1) as i32)) }
            } else {
                field as f64 / s as f64
            };
            *o = (sign * norm * level) as f32;
        }
    });
    Ok(out)
}

fn read_scale(p: &[u8], at: usize) -> Result<f32> {
    let v = f32::from_le_bytes(p[at..at + 4].try_into().unwrap());
    if !v.is_finite() || v < 0.0 {
        return Err(malformed(at, format!("scale/norm field {v} not finite nonnegative")));
    }
    Ok(v)
}
