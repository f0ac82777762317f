//! Contiguous block partitions of the coordinate index space.
//!
//! Layer-wise optimizers normalize their update per block; the default
//! mapping is one block per model tensor.

use crate::error::{Error, Result};
use std::ops::Range;

/// Ordered, disjoint, contiguous index ranges covering `[0, d)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    /// `offsets[b]..offsets[b + 1]` is block `b`; `offsets[B] == d`.
    offsets: Vec<usize>,
}

impl BlockPartition {
    /// Single block covering the whole vector.
    pub fn single(d: usize) -> Result<Self> {
        make_partition(d, &[d])
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn block_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn block_range(&self, b: usize) -> Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    pub fn block_len(&self, b: usize) -> usize {
        self.offsets[b + 1] - self.offsets[b]
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.block_count()).map(|b| self.block_range(b))
    }
}

/// Build a partition of `[0, d)` from per-block sizes, in order.
pub fn make_partition(d: usize, block_sizes: &[usize]) -> Result<BlockPartition> {
    if let Some(index) = block_sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyBlock { index });
    }
    let sum: usize = block_sizes.iter().sum();
    if sum != d || d == 0 {
        return Err(Error::SizeMismatch { sum, expected: d });
    }
    let mut offsets = Vec::with_capacity(block_sizes.len() + 1);
    offsets.push(0);
    let mut acc = 0;
    for &s in block_sizes {
        acc += s;
        offsets.push(acc);
    }
    Ok(BlockPartition { offsets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block_identity() {
        let p = make_partition(4, &[4]).unwrap();
        assert_eq!(p.block_count(), 1);
        assert_eq!(p.block_range(0), 0..4);
    }

    #[test]
    fn two_blocks_contiguous() {
        let p = make_partition(5, &[2, 3]).unwrap();
        assert_eq!(p.block_range(0), 0..2);
        assert_eq!(p.block_range(1), 2..5);
        assert_eq!(p.len(), 5);
    }

    #[test]
    fn size_mismatch_rejected() {
        assert!(matches!(
            make_partition(4, &[2, 3]),
            Err(Error::SizeMismatch { sum: 5, expected: 4 })
        ));
    }

    #[test]
    fn empty_block_rejected() {
        assert!(matches!(
            make_partition(4, &[2, 0, 2]),
            Err(Error::EmptyBlock { index: 1 })
        ));
    }
}
