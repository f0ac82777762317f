//! Counter-based deterministic randomness.
//!
//! Streams are keyed by (seed, node, iteration, tensor, stage) and support
//! random access by counter, so any chunk of a stream can be generated on
//! any thread with no shared state. Identical coordinates always produce
//! identical bytes; compression randomness therefore never depends on
//! thread scheduling or arrival order.
//!
//! The generator is SplitMix64 run in counter mode: output `i` of a stream
//! is `mix64(key + i * GAMMA)`.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stage tags separating the independent streams of one (seed, node,
/// iteration, tensor) tuple.
pub mod stage {
    /// Worker-side push compression.
    pub const PUSH: u32 = 0;
    /// Server-side pull (re-)compression.
    pub const PULL: u32 = 1;
    /// Monte Carlo trial index stream.
    pub const TRIAL: u32 = 2;
    /// Per-step data shuffling.
    pub const DATA_SHUFFLE: u32 = 3;
    /// Parameter / dataset initialization.
    pub const INIT: u32 = 4;
    /// Synthetic gradient noise.
    pub const NOISE: u32 = 5;
    /// Test fuzz corpora.
    pub const FUZZ: u32 = 6;
}

/// Coordinates identifying one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamKey {
    pub seed: u64,
    pub node: u32,
    pub iteration: u64,
    pub tensor: u32,
    pub stage: u32,
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        Self { seed, ..Default::default() }
    }

    pub fn node(mut self, node: u32) -> Self {
        self.node = node;
        self
    }

    pub fn iteration(mut self, iteration: u64) -> Self {
        self.iteration = iteration;
        self
    }

    pub fn tensor(mut self, tensor: u32) -> Self {
        self.tensor = tensor;
        self
    }

    pub fn stage(mut self, stage: u32) -> Self {
        self.stage = stage;
        self
    }

    /// Collapse the coordinates into the stream key. Each field passes
    /// through a full mix round so low-entropy inputs (small ids) still
    /// decorrelate the streams.
    fn fold(&self) -> u64 {
        let mut k = mix64(self.seed ^ GAMMA);
        k = mix64(k ^ (self.node as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        k = mix64(k ^ self.iteration.wrapping_mul(0x9FB2_1C65_1E98_DF25));
        k = mix64(k ^ (self.tensor as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
        mix64(k ^ (self.stage as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
    }
}

/// One random stream: cheap to construct, `Copy`, never shared mutably.
#[derive(Debug, Clone, Copy)]
pub struct DeterministicRng {
    key: u64,
    counter: u64,
}

impl DeterministicRng {
    pub fn new(key: StreamKey) -> Self {
        Self { key: key.fold(), counter: 0 }
    }

    /// Random access: output at stream position `i`, independent of any
    /// sequential draws made so far.
    #[inline]
    pub fn u64_at(&self, i: u64) -> u64 {
        mix64(self.key.wrapping_add(i.wrapping_mul(GAMMA)))
    }

    /// Uniform f64 in [0, 1) at stream position `i`.
    #[inline]
    pub fn f64_at(&self, i: u64) -> f64 {
        (self.u64_at(i) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.u64_at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform f64 in [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by 128-bit multiply-shift.
    #[inline]
    pub fn next_range(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal draw (Box-Muller; consumes two stream positions).
    pub fn next_normal(&mut self) -> f64 {
        // (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_coordinates_identical_stream() {
        let k = StreamKey::new(7).node(3).iteration(11).tensor(2).stage(stage::PUSH);
        let mut a = DeterministicRng::new(k);
        let mut b = DeterministicRng::new(k);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn any_coordinate_changes_the_stream() {
        let base = StreamKey::new(7).node(3).iteration(11).tensor(2).stage(stage::PUSH);
        let variants = [
            StreamKey { seed: 8, ..base },
            base.node(4),
            base.iteration(12),
            base.tensor(3),
            base.stage(stage::PULL),
        ];
        let first = DeterministicRng::new(base).u64_at(0);
        for v in variants {
            assert_ne!(DeterministicRng::new(v).u64_at(0), first);
        }
    }

    #[test]
    fn random_access_matches_sequential() {
        let rng = DeterministicRng::new(StreamKey::new(42));
        let mut seq = rng;
        for i in 0..64 {
            assert_eq!(seq.next_u64(), rng.u64_at(i));
        }
    }

    #[test]
    fn rough_uniformity() {
        let mut rng = DeterministicRng::new(StreamKey::new(1));
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| rng.next_f64()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut rng = DeterministicRng::new(StreamKey::new(2));
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
