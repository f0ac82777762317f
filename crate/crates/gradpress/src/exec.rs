//! Execution-mode plumbing shared by the data-parallel kernels.
//!
//! Every kernel partitions its input into fixed-size index chunks and
//! combines per-chunk results in chunk order, so sequential and parallel
//! execution produce bit-identical output. The chunk size is a constant,
//! never derived from the thread count.

/// Fixed chunk length for data-parallel kernels (multiple of 8 so packed
/// bit codecs stay byte-aligned at chunk boundaries).
pub const CHUNK: usize = 1 << 16;

/// How to drive a data-parallel kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    /// Single-threaded loop over chunks.
    Sequential,
    /// Chunks dispatched on the rayon pool. Falls back to sequential when
    /// the `parallel` feature is disabled.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Map fixed-size input chunks to output values, in chunk order.
pub fn map_chunks<T, F>(len: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, std::ops::Range<usize>) -> T + Sync,
{
    let ranges: Vec<std::ops::Range<usize>> = chunk_ranges(len).collect();
    match exec {
        Execution::Sequential => ranges
            .into_iter()
            .enumerate()
            .map(|(i, r)| f(i, r))
            .collect(),
        Execution::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                ranges
                    .into_par_iter()
                    .enumerate()
                    .map(|(i, r)| f(i, r))
                    .collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                ranges
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| f(i, r))
                    .collect()
            }
        }
    }
}

/// Iterator over the fixed chunk ranges covering `[0, len)`.
pub fn chunk_ranges(len: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..len.div_ceil(CHUNK)).map(move |i| {
        let start = i * CHUNK;
        start..(start + CHUNK).min(len)
    })
}

/// Drive a writer over `out` split into `chunk_bytes`-sized pieces, one
/// piece per input chunk, in chunk order. Pieces are disjoint, so the
/// parallel and sequential drivers write identical bytes.
pub fn for_byte_chunks<F>(out: &mut [u8], chunk_bytes: usize, exec: Execution, f: F)
where
    F: Fn(usize, &mut [u8]) + Sync,
{
    match exec {
        Execution::Sequential => {
            out.chunks_mut(chunk_bytes).enumerate().for_each(|(i, c)| f(i, c));
        }
        Execution::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                out.par_chunks_mut(chunk_bytes).enumerate().for_each(|(i, c)| f(i, c));
            }
            #[cfg(not(feature = "parallel"))]
            {
                out.chunks_mut(chunk_bytes).enumerate().for_each(|(i, c)| f(i, c));
            }
        }
    }
}

/// Like [`for_byte_chunks`] but over an `f32` output buffer.
pub fn for_f32_chunks<F>(out: &mut [f32], chunk_len: usize, exec: Execution, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    match exec {
        Execution::Sequential => {
            out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        }
        Execution::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            }
            #[cfg(not(feature = "parallel"))]
            {
                out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            }
        }
    }
}

/// Chunk-wise f64 sum with a fixed combination order.
///
/// Both execution modes sum each chunk left-to-right and then fold the
/// per-chunk sums in chunk order, so the result does not depend on the
/// mode or the thread count.
pub fn sum_chunked<F>(len: usize, exec: Execution, term: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    map_chunks(len, exec, |_, r| r.map(&term).sum::<f64>())
        .into_iter()
        .sum()
}
