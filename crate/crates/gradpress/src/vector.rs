//! Dense gradient vectors.
//!
//! Entries are stored as `f32`; every reduction over entries (norms,
//! averages) accumulates in `f64` with a fixed chunk order so results do
//! not depend on thread count or summation schedule.

use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// A dense, finite, non-empty gradient vector. The unit of communication
/// and optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f32>,
}

impl GradientVector {
    /// Build from raw entries, rejecting NaN/infinity and empty input.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        Ok(Self { values })
    }

    /// All-zero vector of length `d`.
    pub fn zeros(d: usize) -> Result<Self> {
        Self::new(vec![0.0; d])
    }

    /// Round an `f64` working buffer down to storage precision.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }

    /// Sum of absolute entries, accumulated in f64.
    pub fn l1_norm(&self) -> f64 {
        self.l1_norm_with(Execution::default())
    }

    pub fn l1_norm_with(&self, exec: Execution) -> f64 {
        exec::sum_chunked(self.len(), exec, |j| (self.values[j] as f64).abs())
    }

    /// Euclidean norm, accumulated in f64.
    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_with(Execution::default())
    }

    pub fn l2_norm_with(&self, exec: Execution) -> f64 {
        exec::sum_chunked(self.len(), exec, |j| {
            let v = self.values[j] as f64;
            v * v
        })
        .sqrt()
    }

    /// Largest absolute entry.
    pub fn linf_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| (*v as f64).abs())
            .fold(0.0, f64::max)
    }

    /// Entry-wise difference `self - other`, exact in f64 before rounding.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        let out: Vec<f32> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| ((*a as f64) - (*b as f64)) as f32)
            .collect();
        Self::new(out)
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for GradientVector {
    type Output = f32;
    fn index(&self, i: usize) -> &f32 {
        &self.values[i]
    }
}

/// Average `n` equal-length vectors with 64-bit accumulation, folding the
/// inputs in slice order so the result is independent of how callers
/// scheduled their production.
pub fn mean_of(vectors: &[GradientVector]) -> Result<GradientVector> {
    let first = vectors.first().ok_or(Error::WorkerCountMismatch {
        expected: 1,
        got: 0,
    })?;
    let d = first.len();
    for v in vectors {
        if v.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    let inv = 1.0 / vectors.len() as f64;
    let mut acc = vec![0.0f64; d];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v.as_slice()) {
            *a += *x as f64;
        }
    }
    GradientVector::new(acc.into_iter().map(|a| (a * inv) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(
            GradientVector::new(vec![1.0, f32::NAN]),
            Err(Error::NonFiniteValue { index: 1 })
        ));
        assert!(matches!(
            GradientVector::new(vec![f32::INFINITY]),
            Err(Error::NonFiniteValue { index: 0 })
        ));
        assert!(matches!(GradientVector::new(vec![]), Err(Error::EmptyVector)));
    }

    #[test]
    fn l1_norm_cases() {
        let z = GradientVector::zeros(3).unwrap();
        assert_eq!(z.l1_norm(), 0.0);
        let x = GradientVector::new(vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(x.l1_norm(), 6.0);
        let y = GradientVector::new(vec![0.5, -0.5]).unwrap();
        assert_eq!(y.l1_norm(), 1.0);
    }

    #[test]
    fn l2_norm_cases() {
        let z = GradientVector::zeros(2).unwrap();
        assert_eq!(z.l2_norm(), 0.0);
        let x = GradientVector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(x.l2_norm(), 5.0);
        let y = GradientVector::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(y.l2_norm(), 2.0);
    }

    #[test]
    fn norms_agree_across_execution_modes() {
        let x: Vec<f32> = (0..200_000).map(|i| ((i * 2654435761u64 as usize) as f32).sin()).collect();
        let x = GradientVector::new(x).unwrap();
        assert_eq!(
            x.l1_norm_with(Execution::Sequential).to_bits(),
            x.l1_norm_with(Execution::Parallel).to_bits()
        );
        assert_eq!(
            x.l2_norm_with(Execution::Sequential).to_bits(),
            x.l2_norm_with(Execution::Parallel).to_bits()
        );
    }

    #[test]
    fn mean_matches_hand_average() {
        let a = GradientVector::new(vec![2.0, 0.0]).unwrap();
        let b = GradientVector::new(vec![0.0, 2.0]).unwrap();
        let m = mean_of(&[a, b]).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 1.0]);
    }
}
