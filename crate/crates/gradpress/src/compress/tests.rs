use super::*;
use crate::rng::{stage, StreamKey};

fn rng(seed: u64) -> DeterministicRng {
    DeterministicRng::new(StreamKey::new(seed).stage(stage::FUZZ))
}

fn gv(values: &[f32]) -> GradientVector {
    GradientVector::new(values.to_vec()).unwrap()
}

#[test]
fn none_is_lossless() {
    let x = gv(&[1.5, -2.25]);
    let msg = compress(CompressorKind::None, &x, &rng(0)).unwrap();
    assert_eq!(msg.payload, [1.5f32.to_le_bytes(), (-2.25f32).to_le_bytes()].concat());
    assert_eq!(decompress(&msg).unwrap(), x);
}

#[test]
fn scaled_sign_hand_example() {
    // scale = l1/d = 6/3 = 2, signs (+, -, +)
    let x = gv(&[1.0, -2.0, 3.0]);
    let msg = compress(CompressorKind::ScaledSign, &x, &rng(0)).unwrap();
    let decoded = decompress(&msg).unwrap();
    assert_eq!(decoded.as_slice(), &[2.0, -2.0, 2.0]);
}

#[test]
fn scaled_sign_zero_scale_decodes_to_zeros() {
    // Hand-built payload: scale 0, arbitrary sign bits, d = 3.
    let msg = CompressedMessage {
        kind: CompressorKind::ScaledSign,
        original_len: 3,
        payload: [0f32.to_le_bytes().as_slice(), &[0b0000_0101]].concat(),
    };
    let decoded = decompress(&msg).unwrap();
    assert_eq!(decoded.l1_norm(), 0.0);
}

#[test]
fn top_k_keeps_largest_magnitudes() {
    let x = gv(&[0.1, -5.0, 0.2, 3.0]);
    let kind = CompressorKind::top_k(SparseBudget::Count(2));
    let msg = compress(kind, &x, &rng(0)).unwrap();
    assert_eq!(decompress(&msg).unwrap().as_slice(), &[0.0, -5.0, 0.0, 3.0]);
}

#[test]
fn top_k_tie_breaks_to_lower_index() {
    let x = gv(&[1.0, -1.0, 1.0]);
    let kind = CompressorKind::top_k(SparseBudget::Count(2));
    let msg = compress(kind, &x, &rng(0)).unwrap();
    assert_eq!(decompress(&msg).unwrap().as_slice(), &[1.0, -1.0, 0.0]);
}

#[test]
fn sparse_decode_places_pairs() {
    // (index 0, value 7.0) with d = 2 -> [7, 0]
    let mut payload = 1u64.to_le_bytes().to_vec();
    payload.extend_from_slice(&0u32.to_le_bytes());
    payload.extend_from_slice(&7.0f32.to_le_bytes());
    let msg = CompressedMessage {
        kind: CompressorKind::top_k(SparseBudget::Count(1)),
        original_len: 2,
        payload,
    };
    assert_eq!(decompress(&msg).unwrap().as_slice(), &[7.0, 0.0]);
}

#[test]
fn sparse_out_of_range_index_is_malformed() {
    let mut payload = 1u64.to_le_bytes().to_vec();
    payload.extend_from_slice(&5u32.to_le_bytes());
    payload.extend_from_slice(&1.0f32.to_le_bytes());
    let msg = CompressedMessage {
        kind: CompressorKind::top_k(SparseBudget::Count(1)),
        original_len: 4,
        payload,
    };
    assert!(matches!(decompress(&msg), Err(Error::MalformedPayload { .. })));
}

#[test]
fn fractional_k_resolution() {
    assert_eq!(SparseBudget::Fraction(0.001).resolve(1_000_000).unwrap(), 1000);
    assert_eq!(SparseBudget::Fraction(0.001).resolve(10).unwrap(), 1); // floor(0.01) -> min 1
    assert_eq!(SparseBudget::Fraction(1.0 / 32.0).resolve(64).unwrap(), 2);
    assert!(matches!(
        SparseBudget::Count(5).resolve(4),
        Err(Error::KTooLarge { k: 5, len: 4 })
    ));
}

#[test]
fn random_k_full_selection_is_identity() {
    let x = gv(&[0.5, -1.25, 3.75]);
    let kind = CompressorKind::random_k(SparseBudget::Count(3));
    let msg = compress(kind, &x, &rng(9)).unwrap();
    assert_eq!(decompress(&msg).unwrap(), x);
}

#[test]
fn random_k_two_outcome_enumeration() {
    // d=2, k=1, x=[2,0]: outcomes [4,0] or [0,0], each with probability 1/2.
    let x = gv(&[2.0, 0.0]);
    let kind = CompressorKind::random_k(SparseBudget::Count(1));
    let mut hits = [0u32; 2];
    let trials = 20_000;
    let mut mean = [0.0f64; 2];
    for t in 0..trials {
        let r = DeterministicRng::new(StreamKey::new(5).iteration(t).stage(stage::TRIAL));
        let out = decompress(&compress(kind, &x, &r).unwrap()).unwrap();
        match out.as_slice() {
            [4.0, 0.0] => hits[0] += 1,
            [0.0, 0.0] => hits[1] += 1,
            other => panic!("unexpected outcome {other:?}"),
        }
        mean[0] += out[0] as f64;
        mean[1] += out[1] as f64;
    }
    let p = hits[0] as f64 / trials as f64;
    assert!((p - 0.5).abs() < 0.02, "selection probability {p}");
    assert!((mean[0] / trials as f64 - 2.0).abs() < 0.05);
    assert_eq!(mean[1], 0.0);
}

#[test]
fn random_k_zero_vector_stays_zero() {
    let x = GradientVector::zeros(5).unwrap();
    let kind = CompressorKind::random_k(SparseBudget::Count(2));
    let out = decompress(&compress(kind, &x, &rng(3)).unwrap()).unwrap();
    assert_eq!(out.l1_norm(), 0.0);
}

#[test]
fn linear_dither_zero_and_scalar_exactness() {
    let z = GradientVector::zeros(4).unwrap();
    let msg = compress(CompressorKind::LinearDither { bits: 5 }, &z, &rng(1)).unwrap();
    assert_eq!(decompress(&msg).unwrap().l1_norm(), 0.0);

    for bits in [2u8, 3, 5, 8] {
        let c = gv(&[-0.7321]);
        let msg = compress(CompressorKind::LinearDither { bits }, &c, &rng(2)).unwrap();
        assert_eq!(decompress(&msg).unwrap(), c, "bits={bits}");
    }
}

#[test]
fn linear_dither_two_bit_expectation() {
    // bits=2 => grid {0,1}; x=[3,4] normalized [0.6, 0.8]; outcomes in {0,5}.
    let x = gv(&[3.0, 4.0]);
    let kind = CompressorKind::LinearDither { bits: 2 };
    let trials = 40_000u64;
    let mut sums = [0.0f64; 2];
    for t in 0..trials {
        let r = DeterministicRng::new(StreamKey::new(11).iteration(t).stage(stage::TRIAL));
        let out = decompress(&compress(kind, &x, &r).unwrap()).unwrap();
        for (j, v) in out.as_slice().iter().enumerate() {
            assert!(*v == 0.0 || *v == 5.0, "outcome {v} off the grid");
            sums[j] += *v as f64;
        }
    }
    assert!((sums[0] / trials as f64 - 3.0).abs() < 0.05);
    assert!((sums[1] / trials as f64 - 4.0).abs() < 0.05);
}

#[test]
fn natural_dither_zero_scalar_and_expectation() {
    let z = GradientVector::zeros(3).unwrap();
    let msg = compress(CompressorKind::NaturalDither { bits: 3 }, &z, &rng(1)).unwrap();
    assert_eq!(decompress(&msg).unwrap().l1_norm(), 0.0);

    let c = gv(&[2.5]);
    let msg = compress(CompressorKind::NaturalDither { bits: 3 }, &c, &rng(2)).unwrap();
    assert_eq!(decompress(&msg).unwrap(), c);

    // Normalized entry 0.75 brackets (1/2, 1) with up-probability 1/2.
    let x = gv(&[3.0, (7.0f64).sqrt() as f32]); // norm ~4, first entry ~0.75 normalized
    let kind = CompressorKind::NaturalDither { bits: 3 };
    let trials = 40_000u64;
    let mut up = 0u64;
    for t in 0..trials {
        let r = DeterministicRng::new(StreamKey::new(13).iteration(t).stage(stage::TRIAL));
        let out = decompress(&compress(kind, &x, &r).unwrap()).unwrap();
        let norm = x.l2_norm() as f32;
        assert!(out[0] == norm || out[0] == norm / 2.0, "outcome {} off grid", out[0]);
        if out[0] == norm {
            up += 1;
        }
    }
    let p = up as f64 / trials as f64;
    assert!((p - 0.5).abs() < 0.02, "up-probability {p}");
}

#[test]
fn fp16_round_trip_within_half_precision() {
    let x = gv(&[1.0, -0.333333, 65000.0, 1e-4]);
    let msg = compress(CompressorKind::Fp16, &x, &rng(0)).unwrap();
    let out = decompress(&msg).unwrap();
    for (a, b) in x.as_slice().iter().zip(out.as_slice()) {
        assert!((a - b).abs() <= a.abs() * 1e-3 + 1e-7, "{a} vs {b}");
    }
}

#[test]
fn fused_error_update_matches_naive() {
    let q = gv(&[0.1, -5.0, 0.2, 3.0]);
    let kind = CompressorKind::top_k(SparseBudget::Count(2));
    let msg = compress(kind, &q, &rng(0)).unwrap();
    let fused = fused_error_update(&q, &msg).unwrap();
    assert_eq!(fused.as_slice(), &[0.1, 0.0, 0.2, 0.0]);
    let naive = q.sub(&decompress(&msg).unwrap()).unwrap();
    assert_eq!(fused.as_slice(), naive.as_slice());
}

#[test]
fn fused_error_update_full_selection_is_zero() {
    let q = gv(&[1.0, 2.0]);
    let kind = CompressorKind::top_k(SparseBudget::Count(2));
    let msg = compress(kind, &q, &rng(0)).unwrap();
    assert_eq!(fused_error_update(&q, &msg).unwrap().l1_norm(), 0.0);
}

#[test]
fn fused_error_update_rejects_unsupported_kinds() {
    let q = gv(&[1.0, 2.0]);
    let msg = compress(CompressorKind::ScaledSign, &q, &rng(0)).unwrap();
    assert!(matches!(
        fused_error_update(&q, &msg),
        Err(Error::UnsupportedKind { .. })
    ));
    // random-k with k < d rescales values, so zero-filling would not
    // reproduce the naive residual
    let kind = CompressorKind::random_k(SparseBudget::Count(1));
    let msg = compress(kind, &q, &rng(0)).unwrap();
    assert!(matches!(
        fused_error_update(&q, &msg),
        Err(Error::UnsupportedKind { .. })
    ));
}

#[test]
fn delta_lower_bound_cases() {
    // Equal magnitudes: exact representation, delta = 1.
    let x = gv(&[2.0, -2.0, 2.0, -2.0]);
    let delta = delta_lower_bound(CompressorKind::ScaledSign, &x).unwrap();
    assert!((delta - 1.0).abs() < 1e-12);
    let msg = compress(CompressorKind::ScaledSign, &x, &rng(0)).unwrap();
    assert_eq!(decompress(&msg).unwrap(), x);

    let kind = CompressorKind::top_k(SparseBudget::Count(3));
    let y = gv(&[1.0, 2.0, 3.0]);
    assert_eq!(delta_lower_bound(kind, &y).unwrap(), 1.0);

    // Spike vector: delta = 1/4 and the contraction is tight.
    let spike = gv(&[1.0, 0.0, 0.0, 0.0]);
    let delta = delta_lower_bound(CompressorKind::ScaledSign, &spike).unwrap();
    assert_eq!(delta, 0.25);
    let dec = decompress(&compress(CompressorKind::ScaledSign, &spike, &rng(0)).unwrap()).unwrap();
    let err_sq: f64 = spike
        .as_slice()
        .iter()
        .zip(dec.as_slice())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    assert!((err_sq - 0.75).abs() < 1e-9);

    assert!(matches!(
        delta_lower_bound(CompressorKind::ScaledSign, &GradientVector::zeros(3).unwrap()),
        Err(Error::ZeroVector)
    ));
    assert!(matches!(
        delta_lower_bound(CompressorKind::Fp16, &x),
        Err(Error::UnsupportedKind { .. })
    ));
}

#[test]
fn empirical_omega_cases() {
    let x = gv(&[1.0, 1.0]);
    let (bias, var) = empirical_omega(
        CompressorKind::random_k(SparseBudget::Count(2)),
        &x,
        100,
        StreamKey::new(1),
    )
    .unwrap();
    assert_eq!(bias, 0.0);
    assert_eq!(var, 0.0);

    // d=2, k=1: every outcome has |C(x)-x|^2 = |x|^2, so omega -> 1.
    let (bias, var) = empirical_omega(
        CompressorKind::random_k(SparseBudget::Count(1)),
        &x,
        50_000,
        StreamKey::new(2),
    )
    .unwrap();
    assert!(bias < 0.02, "bias {bias}");
    assert!((var - 1.0).abs() < 1e-9, "variance ratio {var}");

    // All normalized entries on the grid: no rounding, omega = 0.
    let grid = gv(&[5.0, 0.0]);
    let (bias, var) = empirical_omega(
        CompressorKind::LinearDither { bits: 5 },
        &grid,
        100,
        StreamKey::new(3),
    )
    .unwrap();
    assert_eq!(bias, 0.0);
    assert_eq!(var, 0.0);

    assert!(matches!(
        empirical_omega(CompressorKind::ScaledSign, &x, 10, StreamKey::new(4)),
        Err(Error::UnsupportedKind { .. })
    ));
}

#[test]
fn frame_round_trip_all_kinds() {
    let x = gv(&[0.5, -1.5, 2.5, -3.5, 4.5]);
    let one = gv(&[42.0]);
    let zero = GradientVector::zeros(5).unwrap();
    let kinds = [
        CompressorKind::None,
        CompressorKind::Fp16,
        CompressorKind::ScaledSign,
        CompressorKind::top_k(SparseBudget::Count(2)),
        CompressorKind::TopK { k: SparseBudget::Count(2), precision: ValuePrecision::F16 },
        CompressorKind::random_k(SparseBudget::Count(3)),
        CompressorKind::LinearDither { bits: 5 },
        CompressorKind::NaturalDither { bits: 3 },
    ];
    for kind in kinds {
        for (tensor_id, v) in [(7u32, &x), (0, &zero)] {
            let msg = compress(kind, v, &rng(17)).unwrap();
            let bytes = encode_frame(&msg, tensor_id);
            let (tid, back) = decode_frame(&bytes).unwrap();
            assert_eq!(tid, tensor_id);
            assert_eq!(back, msg, "kind {kind:?}");
        }
    }
    // d = 1 edge
    let msg = compress(CompressorKind::ScaledSign, &one, &rng(18)).unwrap();
    let (_, back) = decode_frame(&encode_frame(&msg, 1)).unwrap();
    assert_eq!(back, msg);
}

#[test]
fn frame_rejects_truncation_and_bad_version() {
    let x = gv(&[1.0, 2.0]);
    let msg = compress(CompressorKind::None, &x, &rng(0)).unwrap();
    let bytes = encode_frame(&msg, 3);
    assert!(matches!(
        decode_frame(&bytes[..bytes.len() - 1]),
        Err(Error::MalformedPayload { .. })
    ));
    assert!(matches!(decode_frame(&bytes[..10]), Err(Error::MalformedPayload { .. })));
    let mut bad = bytes.clone();
    bad[0] = 2;
    assert!(matches!(decode_frame(&bad), Err(Error::UnknownVersion(2))));
    let mut bad_id = bytes;
    bad_id[1] = 9;
    assert!(matches!(decode_frame(&bad_id), Err(Error::UnknownCompressorId(9))));
}

#[test]
fn payload_size_formula_matches_encoding() {
    let kinds = [
        CompressorKind::None,
        CompressorKind::Fp16,
        CompressorKind::ScaledSign,
        CompressorKind::top_k(SparseBudget::Fraction(0.25)),
        CompressorKind::TopK { k: SparseBudget::Count(3), precision: ValuePrecision::F16 },
        CompressorKind::random_k(SparseBudget::Count(2)),
        CompressorKind::LinearDither { bits: 5 },
        CompressorKind::NaturalDither { bits: 3 },
        CompressorKind::LinearDither { bits: 7 },
    ];
    for d in [1usize, 7, 8, 9, 100, 1000] {
        let values: Vec<f32> = (0..d).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = GradientVector::new(values).unwrap();
        for kind in kinds {
            let msg = match compress(kind, &x, &rng(5)) {
                Ok(msg) => msg,
                Err(Error::KTooLarge { k, len }) => {
                    assert!(k > d && len == d, "unexpected KTooLarge for {kind:?} d {d}");
                    continue;
                }
                Err(e) => panic!("kind {kind:?} d {d}: {e}"),
            };
            assert_eq!(
                msg.payload.len(),
                msg.kind.payload_size(d).unwrap(),
                "kind {kind:?} d {d}"
            );
        }
    }
}

#[test]
fn compression_is_bit_identical_across_execution_modes() {
    let d = CHUNK + 1717;
    let values: Vec<f32> = (0..d)
        .map(|i| {
            let r = DeterministicRng::new(StreamKey::new(99).iteration(i as u64));
            (r.f64_at(0) * 2.0 - 1.0) as f32
        })
        .collect();
    let x = GradientVector::new(values).unwrap();
    let kinds = [
        CompressorKind::None,
        CompressorKind::Fp16,
        CompressorKind::ScaledSign,
        CompressorKind::top_k(SparseBudget::Fraction(0.01)),
        CompressorKind::random_k(SparseBudget::Fraction(1.0 / 32.0)),
        CompressorKind::LinearDither { bits: 5 },
        CompressorKind::NaturalDither { bits: 3 },
    ];
    for kind in kinds {
        let r = rng(1234);
        let seq = compress_with(kind, &x, &r, Execution::Sequential).unwrap();
        let par = compress_with(kind, &x, &r, Execution::Parallel).unwrap();
        assert_eq!(seq, par, "kind {kind:?}");
        let dseq = decompress_with(&seq, Execution::Sequential).unwrap();
        let dpar = decompress_with(&seq, Execution::Parallel).unwrap();
        assert_eq!(dseq, dpar, "decode kind {kind:?}");
    }
}

use crate::exec::CHUNK;
