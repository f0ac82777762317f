//! Gradient compression operators and their wire encodings.
//!
//! Seven compressor kinds: identity, half-precision, scaled sign, top-k,
//! random-k, and two stochastic dithering quantizers (uniform and
//! power-of-two grids). Stochastic kinds draw from counter-based streams
//! keyed per entry, so output is bit-identical across runs and thread
//! counts.

mod codec;
mod frame;

pub use frame::{decode_frame, encode_frame, FRAME_HEADER_LEN};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::rng::DeterministicRng;
use crate::vector::GradientVector;

/// Storage width for kept values of the sparse kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValuePrecision {
    #[default]
    F32,
    F16,
}

/// Element budget for the sparse kinds: an absolute count or a fraction of
/// the vector length. Fractions resolve to `max(1, floor(fraction * d))`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseBudget {
    Count(usize),
    Fraction(f64),
}

impl SparseBudget {
    /// Resolve against a concrete vector length.
    pub fn resolve(&self, d: usize) -> Result<usize> {
        let k = match *self {
            SparseBudget::Count(k) => k,
            SparseBudget::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!("sparse fraction {f} outside (0, 1]")));
                }
                ((f * d as f64).floor() as usize).max(1)
            }
        };
        if k == 0 {
            return Err(Error::Config("sparse k must be positive".into()));
        }
        if k > d {
            return Err(Error::KTooLarge { k, len: d });
        }
        Ok(k)
    }
}

/// A compression operator plus its parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorKind {
    /// Identity: raw f32 payload, lossless.
    None,
    /// IEEE binary16 conversion, round-to-nearest-even.
    Fp16,
    /// `sign(x) * l1(x)/d`: one sign bit per entry plus one scale.
    ScaledSign,
    /// Keep the `k` largest-magnitude entries (ties to the lower index).
    TopK {
        k: SparseBudget,
        precision: ValuePrecision,
    },
    /// Keep `k` uniformly sampled entries, rescaled by `d/k` so the
    /// estimator is unbiased.
    RandomK {
        k: SparseBudget,
        precision: ValuePrecision,
    },
    /// Stochastic rounding onto the uniform grid `{0, 1/s, .., 1}` of the
    /// l2-normalized magnitudes, `s = 2^(bits-1) - 1`. `bits` includes the
    /// sign bit.
    LinearDither { bits: u8 },
    /// Stochastic rounding onto the power-of-two grid
    /// `{0} ∪ {2^-i : i = 0..2^(bits-1)-2}`.
    NaturalDither { bits: u8 },
}

impl CompressorKind {
    pub fn top_k(k: SparseBudget) -> Self {
        CompressorKind::TopK { k, precision: ValuePrecision::F32 }
    }

    pub fn random_k(k: SparseBudget) -> Self {
        CompressorKind::RandomK { k, precision: ValuePrecision::F32 }
    }

    /// Uses randomness during compression.
    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            CompressorKind::RandomK { .. }
                | CompressorKind::LinearDither { .. }
                | CompressorKind::NaturalDither { .. }
        )
    }

    /// Satisfies `E[C(x)] = x`; paired with the plain compressed
    /// aggregation path.
    pub fn is_unbiased(&self) -> bool {
        matches!(
            self,
            CompressorKind::None
                | CompressorKind::RandomK { .. }
                | CompressorKind::LinearDither { .. }
                | CompressorKind::NaturalDither { .. }
        )
    }

    /// Biased contraction; pairs with the error-feedback path.
    pub fn is_contractive(&self) -> bool {
        matches!(self, CompressorKind::ScaledSign | CompressorKind::TopK { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            CompressorKind::None => "none",
            CompressorKind::Fp16 => "fp16",
            CompressorKind::ScaledSign => "scaled_sign",
            CompressorKind::TopK { .. } => "top_k",
            CompressorKind::RandomK { .. } => "random_k",
            CompressorKind::LinearDither { .. } => "linear_dither",
            CompressorKind::NaturalDither { .. } => "natural_dither",
        }
    }

    pub(crate) fn validate(&self, d: usize) -> Result<()> {
        match *self {
            CompressorKind::TopK { k, .. } | CompressorKind::RandomK { k, .. } => {
                k.resolve(d)?;
            }
            CompressorKind::LinearDither { bits } | CompressorKind::NaturalDither { bits } => {
                if !(2..=8).contains(&bits) {
                    return Err(Error::Config(format!("dither bits {bits} outside [2, 8]")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// The same kind with fractional sparse budgets resolved to counts.
    pub fn resolved(&self, d: usize) -> Result<Self> {
        Ok(match *self {
            CompressorKind::TopK { k, precision } => CompressorKind::TopK {
                k: SparseBudget::Count(k.resolve(d)?),
                precision,
            },
            CompressorKind::RandomK { k, precision } => CompressorKind::RandomK {
                k: SparseBudget::Count(k.resolve(d)?),
                precision,
            },
            other => {
                other.validate(d)?;
                other
            }
        })
    }

    /// Exact encoded payload size in bytes for a length-`d` vector
    /// (frame header excluded).
    pub fn payload_size(&self, d: usize) -> Result<usize> {
        Ok(match *self {
            CompressorKind::None => 4 * d,
            CompressorKind::Fp16 => 2 * d,
            CompressorKind::ScaledSign => 4 + d.div_ceil(8),
            CompressorKind::TopK { k, precision } | CompressorKind::RandomK { k, precision } => {
                let k = k.resolve(d)?;
                let value_bytes = match precision {
                    ValuePrecision::F32 => 4,
                    ValuePrecision::F16 => 2,
                };
                8 + k * (4 + value_bytes)
            }
            CompressorKind::LinearDither { bits } | CompressorKind::NaturalDither { bits } => {
                self.validate(d)?;
                4 + (d * bits as usize).div_ceil(8)
            }
        })
    }
}

/// Self-describing encoded gradient: the wire unit.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    /// Resolved compressor (sparse budgets are concrete counts).
    pub kind: CompressorKind,
    /// Element count of the original vector.
    pub original_len: usize,
    /// Encoded bytes, laid out per the frame documentation.
    pub payload: Vec<u8>,
}

/// Compress with the crate-default execution mode.
pub fn compress(
    kind: CompressorKind,
    x: &GradientVector,
    rng: &DeterministicRng,
) -> Result<CompressedMessage> {
    compress_with(kind, x, rng, Execution::default())
}

/// Compress `x` under `kind`, drawing any randomness from `rng`'s stream.
///
/// Output is bit-identical across execution modes: kernels partition by
/// fixed index ranges and stochastic draws are keyed by entry position.
pub fn compress_with(
    kind: CompressorKind,
    x: &GradientVector,
    rng: &DeterministicRng,
    exec: Execution,
) -> Result<CompressedMessage> {
    let kind = kind.resolved(x.len())?;
    let payload = codec::encode(kind, x, rng, exec)?;
    debug_assert_eq!(payload.len(), kind.payload_size(x.len()).unwrap());
    Ok(CompressedMessage { kind, original_len: x.len(), payload })
}

/// Decode with the crate-default execution mode.
pub fn decompress(msg: &CompressedMessage) -> Result<GradientVector> {
    decompress_with(msg, Execution::default())
}

/// Decode a message back to a dense vector, validating the payload.
pub fn decompress_with(msg: &CompressedMessage, exec: Execution) -> Result<GradientVector> {
    codec::decode(msg, exec)
}

/// Error-feedback residual `q - decompress(msg)` for sparse messages,
/// computed by copying `q` and zeroing the selected indices.
///
/// Only valid when the decoded values reproduce `q` exactly at the kept
/// indices: top-k with f32 values, or random-k with f32 values and `k = d`
/// (unit rescale). Bit-identical to the naive decompress-and-subtract
/// path; callers fall back to that path for every other kind.
pub fn fused_error_update(
    q: &GradientVector,
    msg: &CompressedMessage,
) -> Result<GradientVector> {
    let supported = match msg.kind {
        CompressorKind::TopK { precision: ValuePrecision::F32, .. } => true,
        CompressorKind::RandomK { k, precision: ValuePrecision::F32 } => {
            k.resolve(msg.original_len)? == msg.original_len
        }
        _ => false,
    };
    if !supported {
        return Err(Error::UnsupportedKind {
            op: "fused_error_update",
            kind: format!("{:?}", msg.kind),
        });
    }
    if q.len() != msg.original_len {
        return Err(Error::LengthMismatch { expected: msg.original_len, got: q.len() });
    }
    let indices = codec::sparse_indices(msg)?;
    let mut e = q.as_slice().to_vec();
    for idx in indices {
        e[idx as usize] = 0.0;
    }
    GradientVector::new(e)
}

/// Certified contraction factor for this vector: the delta such that
/// `|C(x) - x|^2 <= (1 - delta) |x|^2` is guaranteed.
pub fn delta_lower_bound(kind: CompressorKind, x: &GradientVector) -> Result<f64> {
    let d = x.len() as f64;
    match kind {
        CompressorKind::ScaledSign => {
            let l2 = x.l2_norm();
            if l2 == 0.0 {
                return Err(Error::ZeroVector);
            }
            let l1 = x.l1_norm();
            Ok((l1 * l1) / (d * l2 * l2))
        }
        CompressorKind::TopK { k, .. } => {
            if x.l2_norm() == 0.0 {
                return Err(Error::ZeroVector);
            }
            Ok(k.resolve(x.len())? as f64 / d)
        }
        other => Err(Error::UnsupportedKind {
            op: "delta_lower_bound",
            kind: other.name().into(),
        }),
    }
}

/// Monte Carlo characterization of an unbiased compressor on `x`:
/// `mean_bias` estimates `|E[C(x)] - x|` (should vanish) and
/// `variance_ratio` estimates `E|C(x) - x|^2 / |x|^2` (the empirical
/// omega). Trial `i` draws from the stream at iteration `i` of `base`.
pub fn empirical_omega(
    kind: CompressorKind,
    x: &GradientVector,
    trials: u64,
    base: crate::rng::StreamKey,
) -> Result<(f64, f64)> {
    if !kind.is_stochastic() {
        return Err(Error::UnsupportedKind {
            op: "empirical_omega",
            kind: kind.name().into(),
        });
    }
    let norm_sq = {
        let n = x.l2_norm();
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        n * n
    };
    let d = x.len();
    let base = base.stage(crate::rng::stage::TRIAL);
    // Per-trial work is independent; chunks of trials accumulate
    // sequentially and fold in order, so the estimate is identical for
    // any thread count.
    let partials = exec::map_chunks(trials as usize, Execution::default(), |_, range| {
        let mut sum: Vec<f64> = vec![0.0; d];
        let mut dev_sq = 0.0f64;
        for trial in range {
            let rng = DeterministicRng::new(base.iteration(trial as u64));
            let msg = compress_with(kind, x, &rng, Execution::Sequential).expect("compress");
            let decoded = decompress_with(&msg, Execution::Sequential).expect("decode");
            let mut dev = 0.0f64;
            for j in 0..d {
                let c = decoded[j] as f64;
                sum[j] += c;
                let e = c - x[j] as f64;
                dev += e * e;
            }
            dev_sq += dev;
        }
        (sum, dev_sq)
    });
    let mut sum = vec![0.0f64; d];
    let mut dev_sq = 0.0f64;
    for (s, v) in partials {
        for j in 0..d {
            sum[j] += s[j];
        }
        dev_sq += v;
    }
    let inv = 1.0 / trials as f64;
    let mean_bias = sum
        .iter()
        .zip(x.as_slice())
        .map(|(s, &xj)| {
            let b = s * inv - xj as f64;
            b * b
        })
        .sum::<f64>()
        .sqrt();
    Ok((mean_bias, dev_sq * inv / norm_sq))
}

#[cfg(test)]
mod tests;
