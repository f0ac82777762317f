//! Property tests for the codec and protocol invariants.

use gradpress::compress::{
    compress, decode_frame, decompress, encode_frame, fused_error_update, CompressorKind,
    SparseBudget, ValuePrecision,
};
use gradpress::optim::{join_blocks, split_blocks};
use gradpress::rng::{stage, StreamKey};
use gradpress::{make_partition, DeterministicRng, GradientVector};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn vector_strategy(max_len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1e3f32..1e3, 1..max_len)
}

fn kind_strategy() -> impl Strategy<Value = CompressorKind> {
    prop_oneof![
        Just(CompressorKind::None),
        Just(CompressorKind::Fp16),
        Just(CompressorKind::ScaledSign),
        (0.01f64..=1.0).prop_map(|f| CompressorKind::top_k(SparseBudget::Fraction(f))),
        (0.01f64..=1.0).prop_map(|f| CompressorKind::TopK {
            k: SparseBudget::Fraction(f),
            precision: ValuePrecision::F16,
        }),
        (0.01f64..=1.0).prop_map(|f| CompressorKind::random_k(SparseBudget::Fraction(f))),
        (2u8..=8).prop_map(|bits| CompressorKind::LinearDither { bits }),
        (2u8..=8).prop_map(|bits| CompressorKind::NaturalDither { bits }),
    ]
}

proptest! {
    #[test]
    fn norm_chain_holds(values in vector_strategy(200)) {
        let x = GradientVector::new(values).unwrap();
        let l1 = x.l1_norm();
        let l2 = x.l2_norm();
        let linf = x.linf_norm();
        // Standard norm inequalities with rounding slack.
        prop_assert!(l1 >= l2 * (1.0 - 1e-12));
        prop_assert!(l2 >= linf * (1.0 - 1e-12));
    }

    #[test]
    fn partition_round_trip(values in vector_strategy(128), cuts in prop::collection::vec(1usize..6, 0..4)) {
        let d = values.len();
        // Build block sizes from random cuts, padding the last block.
        let mut sizes = Vec::new();
        let mut used = 0;
        for c in cuts {
            if used + c < d {
                sizes.push(c);
                used += c;
            }
        }
        sizes.push(d - used);
        let partition = make_partition(d, &sizes).unwrap();
        let x = GradientVector::new(values).unwrap();
        let blocks = split_blocks(&partition, &x);
        let map: BTreeMap<u32, GradientVector> =
            blocks.into_iter().enumerate().map(|(b, v)| (b as u32, v)).collect();
        let back = join_blocks(&partition, &map).unwrap();
        prop_assert_eq!(back.as_slice(), x.as_slice());
    }

    #[test]
    fn frame_round_trip(values in vector_strategy(300), kind in kind_strategy(), seed in any::<u64>(), tensor in any::<u32>()) {
        let x = GradientVector::new(values).unwrap();
        let rng = DeterministicRng::new(StreamKey::new(seed).stage(stage::FUZZ));
        let msg = compress(kind, &x, &rng).unwrap();
        let (tid, back) = decode_frame(&encode_frame(&msg, tensor)).unwrap();
        prop_assert_eq!(tid, tensor);
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn fused_update_matches_naive(values in vector_strategy(300), frac in 0.01f64..=1.0, seed in any::<u64>()) {
        let q = GradientVector::new(values).unwrap();
        let kind = CompressorKind::top_k(SparseBudget::Fraction(frac));
        let rng = DeterministicRng::new(StreamKey::new(seed).stage(stage::FUZZ));
        let msg = compress(kind, &q, &rng).unwrap();
        let fused = fused_error_update(&q, &msg).unwrap();
        let naive = q.sub(&decompress(&msg).unwrap()).unwrap();
        prop_assert_eq!(fused.as_slice(), naive.as_slice());
    }

    #[test]
    fn deterministic_kinds_are_projections(values in vector_strategy(200), which in 0usize..4, frac in 0.01f64..=1.0) {
        let kind = match which {
            0 => CompressorKind::None,
            1 => CompressorKind::Fp16,
            2 => CompressorKind::ScaledSign,
            _ => CompressorKind::top_k(SparseBudget::Fraction(frac)),
        };
        let x = GradientVector::new(values).unwrap();
        let rng = DeterministicRng::new(StreamKey::new(1).stage(stage::FUZZ));
        let once = decompress(&compress(kind, &x, &rng).unwrap()).unwrap();
        let twice = decompress(&compress(kind, &once, &rng).unwrap()).unwrap();
        prop_assert_eq!(once.as_slice(), twice.as_slice());
    }

    #[test]
    fn contraction_never_violated(values in vector_strategy(200), frac in 0.01f64..=1.0) {
        use gradpress::compress::delta_lower_bound;
        let x = GradientVector::new(values).unwrap();
        if x.l2_norm() == 0.0 {
            return Ok(());
        }
        for kind in [CompressorKind::ScaledSign, CompressorKind::top_k(SparseBudget::Fraction(frac))] {
            let delta = delta_lower_bound(kind, &x).unwrap();
            let rng = DeterministicRng::new(StreamKey::new(2).stage(stage::FUZZ));
            let decoded = decompress(&compress(kind, &x, &rng).unwrap()).unwrap();
            let err: f64 = x
                .as_slice()
                .iter()
                .zip(decoded.as_slice())
                .map(|(a, b)| ((*a as f64) - (*b as f64)).powi(2))
                .sum();
            let norm_sq = x.l2_norm().powi(2);
            prop_assert!(err <= (1.0 - delta) * norm_sq * (1.0 + 1e-6) + 1e-9);
        }
    }
}
