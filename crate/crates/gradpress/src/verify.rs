//! Runnable invariant suites behind the `verify` CLI command.
//!
//! Each check returns a pass/fail verdict and its worst-case margin
//! (how much room was left before violation; negative means violated).
//! The suites are smaller-budget versions of the acceptance tests, meant
//! for quick operator verification of a build.

use crate::analysis;
use crate::compress::{
    compress, compress_with, decode_frame, decompress, delta_lower_bound, encode_frame,
    fused_error_update, CompressorKind, SparseBudget,
};
use crate::error::Result;
use crate::exec::Execution;
use crate::harness::{
    desk_aggregation, run_experiment, LrSpec, OptimizerConfig, ProblemConfig, RunConfig,
    TransportConfig,
};
use crate::protocol::{AggregationMode, ShardPolicy};
use crate::rng::{stage, DeterministicRng, StreamKey};
use crate::vector::GradientVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Compressors,
    Protocol,
    Bounds,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "compressors" => Ok(Suite::Compressors),
            "protocol" => Ok(Suite::Protocol),
            "bounds" => Ok(Suite::Bounds),
            "all" => Ok(Suite::All),
            other => Err(format!("unknown suite `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst slack observed; negative means the invariant was violated.
    pub worst_margin: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, worst_margin: f64, detail: String) -> Self {
        Self { name, passed, worst_margin, detail }
    }
}

/// Test hooks for deliberate corruption; all zero in normal operation.
#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Added to every certified contraction factor before it is used in a
    /// check. A positive skew claims the compressors are better than they
    /// are, which a sound checker must catch.
    pub delta_skew: f64,
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    match suite {
        Suite::Compressors => compressors_suite(opts, &mut out)?,
        Suite::Protocol => protocol_suite(opts, &mut out)?,
        Suite::Bounds => bounds_suite(opts, &mut out)?,
        Suite::All => {
            compressors_suite(opts, &mut out)?;
            protocol_suite(opts, &mut out)?;
            bounds_suite(opts, &mut out)?;
        }
    }
    Ok(out)
}

fn fuzz_vector(seed: u64, idx: u64, d: usize) -> GradientVector {
    let rng = DeterministicRng::new(StreamKey::new(seed).iteration(idx).stage(stage::FUZZ));
    GradientVector::new(
        (0..d)
            .map(|j| {
                let u = rng.f64_at(j as u64);
                ((u * 2.0 - 1.0) * 3.0) as f32
            })
            .collect(),
    )
    .expect("finite fuzz vector")
}

fn compressors_suite(opts: &VerifyOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    // Contraction: |C(x) - x|^2 <= (1 - delta) |x|^2 with 1e-6 slack.
    {
        let mut worst = f64::INFINITY;
        let mut violations = 0u64;
        let mut checked = 0u64;
        for kind in [
            CompressorKind::ScaledSign,
            CompressorKind::top_k(SparseBudget::Fraction(0.25)),
        ] {
            for d in [1usize, 7, 100, 1000] {
                for i in 0..500u64 {
                    let x = fuzz_vector(opts.seed ^ 0xA1, i, d);
                    if x.l2_norm() == 0.0 {
                        continue;
                    }
                    let delta = delta_lower_bound(kind, &x)? + opts.delta_skew;
                    let rng = DeterministicRng::new(StreamKey::new(opts.seed).iteration(i));
                    let decoded = decompress(&compress(kind, &x, &rng)?)?;
                    let err_sq: f64 = x
                        .as_slice()
                        .iter()
                        .zip(decoded.as_slice())
                        .map(|(a, b)| ((*a as f64) - (*b as f64)).powi(2))
                        .sum();
                    let norm_sq = x.l2_norm().powi(2);
                    let bound = (1.0 - delta) * norm_sq * (1.0 + 1e-6) + 1e-12;
                    checked += 1;
                    let margin = bound - err_sq;
                    worst = worst.min(margin);
                    if margin < 0.0 {
                        violations += 1;
                    }
                }
            }
        }
        out.push(CheckResult::new(
            "compressors/delta_approximation",
            violations == 0,
            worst,
            format!("{checked} vectors, {violations} violations"),
        ));
    }

    // Unbiasedness: per-coordinate Monte Carlo mean within 4 standard
    // errors on a fixed vector.
    {
        let x = fuzz_vector(opts.seed ^ 0xB2, 0, 16);
        let trials = 20_000u64;
        let mut worst = f64::INFINITY;
        let mut pass = true;
        for kind in [
            CompressorKind::random_k(SparseBudget::Count(4)),
            CompressorKind::LinearDither { bits: 5 },
            CompressorKind::NaturalDither { bits: 3 },
        ] {
            let margin = unbiasedness_margin(kind, &x, trials, opts.seed);
            worst = worst.min(margin);
            pass &= margin >= 0.0;
        }
        out.push(CheckResult::new(
            "compressors/unbiasedness",
            pass,
            worst,
            format!("{trials} trials per kind, 4-sigma bands"),
        ));
    }

    // Fused residual path is bit-identical to decompress-and-subtract.
    {
        let mut pass = true;
        let mut checked = 0u64;
        for d in [1usize, 9, 257] {
            let kind = CompressorKind::top_k(SparseBudget::Fraction(0.3));
            for i in 0..300u64 {
                let q = fuzz_vector(opts.seed ^ 0xC3, i, d);
                let rng = DeterministicRng::new(StreamKey::new(opts.seed).iteration(i).tensor(1));
                let msg = compress(kind, &q, &rng)?;
                let fused = fused_error_update(&q, &msg)?;
                let naive = q.sub(&decompress(&msg)?)?;
                checked += 1;
                if fused.as_slice() != naive.as_slice() {
                    pass = false;
                }
            }
        }
        out.push(CheckResult::new(
            "compressors/fused_equivalence",
            pass,
            if pass { 0.0 } else { -1.0 },
            format!("{checked} fuzzed pairs, bit compare"),
        ));
    }

    // Frame codec round trip and payload size formula.
    {
        let kinds = [
            CompressorKind::None,
            CompressorKind::Fp16,
            CompressorKind::ScaledSign,
            CompressorKind::top_k(SparseBudget::Fraction(0.2)),
            CompressorKind::random_k(SparseBudget::Fraction(0.5)),
            CompressorKind::LinearDither { bits: 5 },
            CompressorKind::NaturalDither { bits: 3 },
        ];
        let mut pass = true;
        let mut checked = 0u64;
        for d in [1usize, 8, 100] {
            for (i, kind) in kinds.iter().enumerate() {
                let x = fuzz_vector(opts.seed ^ 0xD4, i as u64, d);
                let zero = GradientVector::zeros(d).expect("d > 0");
                for v in [&x, &zero] {
                    let rng =
                        DeterministicRng::new(StreamKey::new(opts.seed).iteration(i as u64));
                    let msg = compress(*kind, v, &rng)?;
                    if msg.payload.len() != msg.kind.payload_size(d)? {
                        pass = false;
                    }
                    let (tid, back) = decode_frame(&encode_frame(&msg, 42))?;
                    checked += 1;
                    if tid != 42 || back != msg {
                        pass = false;
                    }
                }
            }
        }
        out.push(CheckResult::new(
            "compressors/codec_round_trip",
            pass,
            if pass { 0.0 } else { -1.0 },
            format!("{checked} frames"),
        ));
    }

    // Determinism across execution modes.
    {
        let d = 70_000;
        let x = fuzz_vector(opts.seed ^ 0xE5, 1, d);
        let mut pass = true;
        for kind in [
            CompressorKind::ScaledSign,
            CompressorKind::top_k(SparseBudget::Fraction(0.01)),
            CompressorKind::random_k(SparseBudget::Fraction(1.0 / 32.0)),
            CompressorKind::LinearDither { bits: 5 },
            CompressorKind::NaturalDither { bits: 3 },
        ] {
            let rng = DeterministicRng::new(StreamKey::new(opts.seed).tensor(9));
            let a = compress_with(kind, &x, &rng, Execution::Sequential)?;
            let b = compress_with(kind, &x, &rng, Execution::Parallel)?;
            let c = compress_with(kind, &x, &rng, Execution::Parallel)?;
            pass &= a == b && b == c;
        }
        out.push(CheckResult::new(
            "compressors/determinism",
            pass,
            if pass { 0.0 } else { -1.0 },
            "sequential vs parallel vs repeat, bit compare".into(),
        ));
    }
    Ok(())
}

fn unbiasedness_margin(
    kind: CompressorKind,
    x: &GradientVector,
    trials: u64,
    seed: u64,
) -> f64 {
    let d = x.len();
    let base = StreamKey::new(seed).stage(stage::TRIAL).tensor(7);
    let mut sum = vec![0.0f64; d];
    let mut sum_sq = vec![0.0f64; d];
    for t in 0..trials {
        let rng = DeterministicRng::new(base.iteration(t));
        let decoded = decompress(&compress(kind, x, &rng).expect("compress")).expect("decode");
        for j in 0..d {
            let v = decoded[j] as f64;
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    let n = trials as f64;
    let mut worst = f64::INFINITY;
    for j in 0..d {
        let mean = sum[j] / n;
        let var = (sum_sq[j] / n - mean * mean).max(0.0);
        let se = (var / n).sqrt();
        let dev = (mean - x[j] as f64).abs();
        // Allow a tiny absolute floor for coordinates with zero variance.
        worst = worst.min(4.0 * se + 1e-9 - dev);
    }
    worst
}

fn protocol_suite(opts: &VerifyOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    use crate::protocol::{
        compress_ef_push_pull, compress_push_pull, push_pull, AggregationConfig, RoundContext,
        ServerShardState, WorkerState,
    };

    // Identity recovery: NONE reproduces push_pull bit-exactly.
    {
        let mut pass = true;
        let mut rounds = 0u64;
        for n in [1u32, 2, 4] {
            let cfg_plain = AggregationConfig {
                mode: AggregationMode::Compressed,
                compressor: CompressorKind::None,
                size_threshold_bytes: 0,
                n_workers: n,
                ..Default::default()
            };
            let cfg_ef = AggregationConfig { mode: AggregationMode::CompressedEf, ..cfg_plain };
            let mut workers: Vec<WorkerState> = (0..n).map(WorkerState::new).collect();
            let mut shard = ServerShardState::new(0);
            for round in 0..50u64 {
                let grads: Vec<GradientVector> = (0..n)
                    .map(|w| fuzz_vector(opts.seed ^ (w as u64) << 8, round, 23))
                    .collect();
                let ctx = RoundContext { seed: opts.seed, iteration: round };
                let reference = push_pull(&grads)?;
                let a =
                    compress_push_pull(&cfg_plain, &mut workers, &mut shard, 0, &grads, &ctx)?;
                let b =
                    compress_ef_push_pull(&cfg_ef, &mut workers, &mut shard, 1, &grads, &ctx)?;
                rounds += 1;
                pass &= a.as_slice() == reference.as_slice()
                    && b.as_slice() == reference.as_slice();
            }
        }
        out.push(CheckResult::new(
            "protocol/identity_recovery",
            pass,
            if pass { 0.0 } else { -1.0 },
            format!("{rounds} fuzzed rounds, n in {{1,2,4}}"),
        ));
    }

    // Error-feedback reconstruction identities, exact in f64.
    {
        let cfg = desk_aggregation(AggregationMode::CompressedEf, CompressorKind::ScaledSign, 2);
        let mut workers: Vec<crate::protocol::WorkerState> =
            (0..2).map(crate::protocol::WorkerState::new).collect();
        let mut shard = crate::protocol::ServerShardState::new(0);
        let mut pass = true;
        for round in 0..40u64 {
            let grads: Vec<GradientVector> =
                (0..2).map(|w| fuzz_vector(opts.seed ^ 0xF0 ^ w, round, 31)).collect();
            let e_before: Vec<Vec<f64>> = workers
                .iter()
                .map(|w| w.residual(0).map(|e| e.to_vec()).unwrap_or_else(|| vec![0.0; 31]))
                .collect();
            let ctx = crate::protocol::RoundContext { seed: opts.seed, iteration: round };
            for (w, g) in workers.iter_mut().zip(&grads) {
                let wid = w.worker_id() as usize;
                let q64: Vec<f64> = g
                    .as_slice()
                    .iter()
                    .zip(&e_before[wid])
                    .map(|(g, e)| *g as f64 + e)
                    .collect();
                let q = GradientVector::from_f64(&q64)?;
                let outcome = crate::protocol::worker_prepare_push(&cfg, w, 0, g, &ctx)?;
                let dec = decompress(&outcome.msg)?;
                let e_after = w.residual(0).expect("residual created");
                for j in 0..31 {
                    if dec[j] as f64 + e_after[j] != q[j] as f64 {
                        pass = false;
                    }
                }
                shard.ingest(&cfg, round, 0, w.worker_id(), outcome.msg, &ctx)?;
            }
        }
        out.push(CheckResult::new(
            "protocol/ef_conservation",
            pass,
            if pass { 0.0 } else { -1.0 },
            "40 rounds, exact f64 reconstruction".into(),
        ));
    }

    // Residual norms stay under the lemma bounds along a real run.
    {
        let mut worst = f64::INFINITY;
        let mut pass = true;
        let mut detail = String::new();
        for kind in [
            CompressorKind::ScaledSign,
            CompressorKind::top_k(SparseBudget::Fraction(0.1)),
        ] {
            // Gradient noise keeps the workers out of lockstep so the
            // server-side residual is exercised too.
            let cfg = RunConfig {
                problem: ProblemConfig::Quadratic { dim: 40, condition: 50.0, noise_sigma: 0.5 },
                optimizer: OptimizerConfig::Lans {
                    beta1: 0.9,
                    beta2: 0.999,
                    epsilon: 1e-6,
                    weight_decay: 0.0,
                    lr: LrSpec::Constant { eta: 0.05 },
                    alpha_l: 0.01,
                    alpha_u: 10.0,
                    blocks: None,
                },
                aggregation: desk_aggregation(AggregationMode::CompressedEf, kind, 2),
                batch_size: 1,
                steps: 200,
                seed: opts.seed ^ 0x51,
                transport: TransportConfig::InProcess,
                record_trace: false,
                record_timing: false,
            };
            let run = run_experiment(&cfg)?;
            let delta = (run.summary.min_certified_delta.expect("contractive run")
                + opts.delta_skew)
                .clamp(1e-12, 1.0);
            let bounds = analysis::lemma_ef_residual_bound(
                delta,
                40,
                run.summary.max_abs_gradient,
            )?;
            let wm = bounds.worker - run.summary.max_worker_residual;
            let sm = bounds.server - run.summary.max_server_residual;
            worst = worst.min(wm.min(sm));
            pass &= wm >= 0.0 && sm >= 0.0;
            detail.push_str(&format!(
                "{}: worker {:.3}<={:.3} server {:.3}<={:.3}; ",
                kind.name(),
                run.summary.max_worker_residual,
                bounds.worker,
                run.summary.max_server_residual,
                bounds.server
            ));
        }
        out.push(CheckResult::new("protocol/residual_bounds", pass, worst, detail));
    }

    // Transport equivalence and per-worker volume constancy.
    {
        use crate::protocol::{tcp::TcpCluster, InProcessCluster, RoundInput, TensorSpec};
        let mut pass = true;
        let mut volumes = Vec::new();
        for n in [1u32, 2, 4] {
            let cfg = AggregationConfig {
                mode: AggregationMode::CompressedEf,
                compressor: CompressorKind::top_k(SparseBudget::Count(3)),
                size_threshold_bytes: 0,
                n_workers: n,
                shard_count: 2,
                shard_policy: ShardPolicy::Modulo,
                local_devices: 1,
            };
            let specs =
                [TensorSpec { id: 0, dim: 16 }, TensorSpec { id: 1, dim: 9 }];
            let mut a = InProcessCluster::new(cfg, &specs)?;
            let mut b = TcpCluster::spawn_local(
                cfg,
                &specs,
                opts.seed,
                std::time::Duration::from_secs(10),
            )?;
            for round in 0..3u64 {
                let mut input = RoundInput::default();
                for spec in &specs {
                    input.gradients.insert(
                        spec.id,
                        (0..n)
                            .map(|w| {
                                fuzz_vector(
                                    opts.seed ^ ((w as u64) << 4) ^ spec.id as u64,
                                    round,
                                    spec.dim,
                                )
                            })
                            .collect(),
                    );
                }
                let ctx = crate::protocol::RoundContext { seed: opts.seed, iteration: round };
                let ra = a.run_round(&input, &ctx)?;
                let rb = b.run_round(&input, &ctx)?;
                for (t, v) in &ra.outputs {
                    pass &= v.as_slice() == rb.outputs[t].as_slice();
                }
                pass &= ra.push_bytes_per_worker == rb.push_bytes_per_worker;
                if round == 0 {
                    volumes.push((ra.push_bytes_per_worker, ra.pull_bytes_per_worker));
                }
            }
        }
        let constant = volumes.windows(2).all(|w| w[0] == w[1]);
        out.push(CheckResult::new(
            "protocol/transport_equivalence_and_volume",
            pass && constant,
            if pass && constant { 0.0 } else { -1.0 },
            format!("per-worker (push, pull) bytes by n: {volumes:?}"),
        ));
    }
    Ok(())
}

fn bounds_suite(opts: &VerifyOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    // Corollary reductions.
    {
        let mut inputs = analysis::BoundInputs::new(6);
        inputs.sigma = vec![0.4; 6];
        inputs.horizon = 50;
        inputs.batch_size = 8;
        inputs.workers = 2;
        let full = analysis::corollary_full_precision(&inputs)?;
        let unbiased =
            analysis::corollary_unbiased(&inputs, 0.0, analysis::OmegaConvention::Deviation)?;
        let biased = analysis::corollary_biased(&inputs, 1.0)?;
        let pass = unbiased.v1 == full.v1
            && unbiased.v2 == full.v2
            && unbiased.v3 == 0.0
            && biased.v1 == full.v1
            && biased.v2 == full.v2
            && biased.v3 == 0.0;
        out.push(CheckResult::new(
            "bounds/corollary_reductions",
            pass,
            if pass { 0.0 } else { -1.0 },
            "omega=0 and delta=1 reduce to full precision".into(),
        ));
    }

    // First-moment gap inequality on oracle-gradient runs.
    {
        let mut pass = true;
        let mut worst = f64::INFINITY;
        for (mode, kind) in [
            (AggregationMode::FullPrecision, CompressorKind::None),
            (AggregationMode::CompressedEf, CompressorKind::ScaledSign),
        ] {
            let dim = 30;
            let cfg = RunConfig {
                problem: ProblemConfig::Quadratic { dim, condition: 20.0, noise_sigma: 0.0 },
                optimizer: OptimizerConfig::Lans {
                    beta1: 0.9,
                    beta2: 0.999,
                    epsilon: 1e-6,
                    weight_decay: 0.0,
                    lr: LrSpec::Constant { eta: 0.02 },
                    alpha_l: 0.01,
                    alpha_u: 10.0,
                    blocks: None,
                },
                aggregation: desk_aggregation(mode, kind, 2),
                batch_size: 1,
                steps: 60,
                seed: opts.seed ^ 0x61,
                transport: TransportConfig::InProcess,
                record_trace: true,
                record_timing: false,
            };
            let problem = cfg.problem.build(cfg.seed);
            let run = run_experiment(&cfg)?;
            let mut inputs = analysis::BoundInputs::new(dim);
            inputs.lipschitz = problem.lipschitz().expect("quadratic");
            inputs.lr = 0.02;
            inputs.beta1 = 0.9;
            inputs.beta2 = 0.999;
            inputs.alpha_u = 10.0;
            let report =
                analysis::lemma_moment_gap_monitor(run.trace.as_ref().expect("trace"), &inputs)?;
            pass &= report.violations == 0;
            worst = worst.min(report.worst_margin);
        }
        out.push(CheckResult::new(
            "bounds/moment_gap",
            pass,
            worst,
            "60-step oracle runs, full precision and sign+EF".into(),
        ));
    }

    // One-sided soundness of the evaluated bound on the quadratic.
    {
        let mut pass = true;
        let mut worst = f64::INFINITY;
        for horizon in [10u64, 100] {
            let (avg, rhs) = theorem_soundness_case(opts.seed, horizon)?;
            worst = worst.min(rhs - avg);
            pass &= avg <= rhs;
        }
        out.push(CheckResult::new(
            "bounds/theorem_soundness",
            pass,
            worst,
            "avg |grad|^2 <= evaluated bound at T in {10, 100}".into(),
        ));
    }
    Ok(())
}

/// Full-precision quadratic run at `eta = 1/sqrt(T)` compared against the
/// evaluated bound with observed G.
fn theorem_soundness_case(seed: u64, horizon: u64) -> Result<(f64, f64)> {
    let dim = 20;
    let cfg = RunConfig {
        problem: ProblemConfig::Quadratic { dim, condition: 10.0, noise_sigma: 0.0 },
        optimizer: OptimizerConfig::Lans {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.0,
            lr: LrSpec::InvSqrtHorizon,
            alpha_l: 0.01,
            alpha_u: 10.0,
            blocks: None,
        },
        aggregation: desk_aggregation(AggregationMode::FullPrecision, CompressorKind::None, 1),
        batch_size: 1,
        steps: horizon,
        seed,
        transport: TransportConfig::InProcess,
        record_trace: false,
        record_timing: false,
    };
    let problem = cfg.problem.build(cfg.seed);
    let run = run_experiment(&cfg)?;
    let mut inputs = analysis::BoundInputs::new(dim);
    inputs.lipschitz = problem.lipschitz().expect("quadratic");
    inputs.grad_bound = run.summary.max_abs_gradient;
    inputs.horizon = horizon;
    inputs.lr = 1.0 / (horizon as f64).sqrt();
    inputs.function_gap = problem.loss(&problem.initial_params(seed).to_f64());
    let constants = analysis::corollary_full_precision(&inputs)?;
    let report = analysis::theorem1_rhs(
        &inputs,
        constants.v1_prime(inputs.epsilon),
        constants.v2,
        constants.v3,
    )?;
    Ok((run.summary.avg_grad_sq_norm, report.rhs))
}
