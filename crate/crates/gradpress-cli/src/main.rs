//! Operator CLI: run experiments, verify invariant suites, benchmark
//! codec throughput, and inspect wire frames.
//!
//! Exit codes: 0 success, 1 runtime failure or verification violation,
//! 2 configuration error.

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use gradpress::compress::{
    compress_with, decode_frame, decompress_with, CompressorKind, SparseBudget,
};
use gradpress::harness::{
    run_experiment, write_metrics_csv, write_summary_csv, RunConfig, TransportConfig,
};
use gradpress::rng::{stage, StreamKey};
use gradpress::verify::{run_suite, Suite, VerifyOptions};
use gradpress::{DeterministicRng, Execution, GradientVector};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "gradpress",
    version,
    about = "Gradient-compression toolkit and parameter-server simulator"
)]
struct Cli {
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for run artifacts (metrics, summary, manifest).
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Override the transport (in-process or tcp over loopback).
    #[arg(long, global = true, value_enum)]
    transport: Option<TransportArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    InProcess,
    Tcp,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment from a TOML config file.
    Train {
        /// Path to the run configuration (a manifest from a previous run
        /// is itself a valid config).
        config: PathBuf,
    },
    /// Run an invariant suite and report pass/fail per check.
    Verify {
        /// compressors | protocol | bounds | all
        suite: Suite,
        /// Test hook: skew every certified contraction factor by this
        /// amount before checking. Nonzero values must make the suite
        /// fail.
        #[arg(long, hide = true, default_value_t = 0.0)]
        inject_delta_skew: f64,
    },
    /// Measure compression/decompression throughput.
    Bench {
        /// Compressor kind: none, fp16, scaled_sign, top_k, random_k,
        /// linear_dither, natural_dither.
        kind: String,
        #[arg(long, default_value_t = 1 << 20)]
        dim: usize,
        /// Worker threads for the parallel path (0 = rayon default).
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Sparse budget as a fraction of dim (sparse kinds).
        #[arg(long, default_value_t = 0.001)]
        k: f64,
        /// Dither bit width including the sign bit.
        #[arg(long, default_value_t = 5)]
        bits: u8,
        /// Minimum measurement window per direction, seconds.
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
    },
    /// Decode and summarize a wire-frame file.
    Inspect { frame: PathBuf },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                2
            } else {
                1
            }
        }
    };
    std::process::exit(code);
}

/// Marker for errors that should exit with code 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Train { config } => cmd_train(&config, &cli.out_dir, cli.seed, cli.transport),
        Command::Verify { suite, inject_delta_skew } => {
            cmd_verify(suite, cli.seed.unwrap_or(99), inject_delta_skew)
        }
        Command::Bench { kind, dim, threads, k, bits, seconds } => {
            cmd_bench(&kind, dim, threads, k, bits, seconds, cli.seed.unwrap_or(0))
        }
        Command::Inspect { frame } => cmd_inspect(&frame),
    }
}

fn cmd_train(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    transport_override: Option<TransportArg>,
) -> anyhow::Result<i32> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", config_path.display())))?;
    let mut cfg: RunConfig =
        toml::from_str(&text).map_err(|e| config_err(format!("invalid config: {e}")))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    match transport_override {
        Some(TransportArg::InProcess) => cfg.transport = TransportConfig::InProcess,
        Some(TransportArg::Tcp) => cfg.transport = TransportConfig::Tcp { timeout_secs: 30 },
        None => {}
    }
    cfg.validate().map_err(|e| config_err(e.to_string()))?;

    std::fs::create_dir_all(out_dir).context("creating output directory")?;
    // The manifest pins the fully resolved configuration; re-running it
    // reproduces the metrics byte for byte.
    let manifest = toml::to_string_pretty(&cfg).context("serializing manifest")?;
    std::fs::write(out_dir.join("manifest.toml"), manifest)?;

    let output = run_experiment(&cfg)?;
    let mut metrics = Vec::new();
    write_metrics_csv(&mut metrics, &output.metrics)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics)?;
    let mut summary = Vec::new();
    write_summary_csv(&mut summary, &output.summary)?;
    std::fs::write(out_dir.join("summary.csv"), summary)?;

    println!(
        "steps={} final_loss={} avg_grad_sq_norm={} push_bytes={} pull_bytes={}",
        output.summary.steps,
        output.summary.final_loss,
        output.summary.avg_grad_sq_norm,
        output.summary.total_push_bytes,
        output.summary.total_pull_bytes
    );
    println!("artifacts written to {}", out_dir.display());
    Ok(0)
}

fn cmd_verify(suite: Suite, seed: u64, delta_skew: f64) -> anyhow::Result<i32> {
    let opts = VerifyOptions { seed, delta_skew };
    let results = run_suite(suite, &opts)?;
    let mut failures = 0;
    for r in &results {
        println!(
            "{} {} (worst margin {:.6e}) - {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.worst_margin,
            r.detail
        );
        if !r.passed {
            failures += 1;
        }
    }
    println!("{} checks, {failures} failures", results.len());
    Ok(if failures == 0 { 0 } else { 1 })
}

fn parse_kind(kind: &str, k: f64, bits: u8) -> anyhow::Result<CompressorKind> {
    Ok(match kind {
        "none" => CompressorKind::None,
        "fp16" => CompressorKind::Fp16,
        "scaled_sign" => CompressorKind::ScaledSign,
        "top_k" => CompressorKind::top_k(SparseBudget::Fraction(k)),
        "random_k" => CompressorKind::random_k(SparseBudget::Fraction(k)),
        "linear_dither" => CompressorKind::LinearDither { bits },
        "natural_dither" => CompressorKind::NaturalDither { bits },
        other => return Err(config_err(format!("unknown compressor kind `{other}`"))),
    })
}

fn cmd_bench(
    kind: &str,
    dim: usize,
    threads: usize,
    k: f64,
    bits: u8,
    seconds: f64,
    seed: u64,
) -> anyhow::Result<i32> {
    let kind = parse_kind(kind, k, bits)?;
    if (4 * dim as u64) < gradpress::protocol::AggregationConfig::default().size_threshold_bytes {
        println!(
            "note: a {}-byte tensor is below the default 1 MiB size threshold; \
             the protocol would send it uncompressed",
            4 * dim
        );
    }
    let rng = DeterministicRng::new(StreamKey::new(seed).stage(stage::FUZZ));
    let values: Vec<f32> =
        (0..dim).map(|j| (rng.f64_at(j as u64) * 2.0 - 1.0) as f32).collect();
    let x = GradientVector::new(values)?;
    let raw_mb = (4 * dim) as f64 / (1024.0 * 1024.0);

    let run_one = |exec: Execution| -> anyhow::Result<(f64, f64, Vec<u8>)> {
        let msg = compress_with(kind, &x, &rng, exec)?;
        let payload = msg.payload.clone();
        let mut reps = 0u64;
        let start = Instant::now();
        while start.elapsed().as_secs_f64() < seconds {
            std::hint::black_box(compress_with(kind, &x, &rng, exec)?);
            reps += 1;
        }
        let compress_mbps = raw_mb * reps as f64 / start.elapsed().as_secs_f64();
        let mut reps = 0u64;
        let start = Instant::now();
        while start.elapsed().as_secs_f64() < seconds {
            std::hint::black_box(decompress_with(&msg, exec)?);
            reps += 1;
        }
        let decompress_mbps = raw_mb * reps as f64 / start.elapsed().as_secs_f64();
        Ok((compress_mbps, decompress_mbps, payload))
    };

    println!("kind={} dim={dim} raw={:.2} MiB", kind.name(), raw_mb);
    println!("{:<14} {:>16} {:>18}", "mode", "compress MB/s", "decompress MB/s");
    let (seq_c, seq_d, seq_payload) = run_one(Execution::Sequential)?;
    println!("{:<14} {:>16.1} {:>18.1}", "sequential", seq_c, seq_d);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building thread pool")?;
    let (par_c, par_d, par_payload) = pool.install(|| run_one(Execution::Parallel))?;
    let label = format!("parallel({})", pool.current_num_threads());
    println!("{:<14} {:>16.1} {:>18.1}", label, par_c, par_d);
    if seq_payload != par_payload {
        anyhow::bail!("parallel and sequential payloads differ");
    }
    println!("outputs bit-identical across modes: yes");
    println!("speedup: compress {:.2}x decompress {:.2}x", par_c / seq_c, par_d / seq_d);
    Ok(0)
}

fn cmd_inspect(path: &Path) -> anyhow::Result<i32> {
    let bytes = std::fs::read(path)
        .map_err(|e| config_err(format!("cannot read frame {}: {e}", path.display())))?;
    let (tensor_id, msg) = decode_frame(&bytes)?;
    println!("tensor_id: {tensor_id}");
    println!("kind: {}", msg.kind.name());
    println!("elements: {}", msg.original_len);
    println!("payload bytes: {}", msg.payload.len());
    match msg.kind {
        CompressorKind::ScaledSign => {
            let scale = f32::from_le_bytes(msg.payload[..4].try_into().unwrap());
            let ones: u32 = msg.payload[4..].iter().map(|b| b.count_ones()).sum();
            println!("scale: {scale}");
            println!("nonnegative sign bits: {ones}");
        }
        CompressorKind::TopK { k, precision } | CompressorKind::RandomK { k, precision } => {
            println!("k: {k:?} precision: {precision:?}");
        }
        CompressorKind::LinearDither { bits } | CompressorKind::NaturalDither { bits } => {
            let norm = f32::from_le_bytes(msg.payload[..4].try_into().unwrap());
            println!("bits: {bits}");
            println!("norm: {norm}");
        }
        _ => {}
    }
    let decoded = decompress_with(&msg, Execution::default())?;
    let head: Vec<f32> = decoded.as_slice().iter().take(8).copied().collect();
    println!("first entries: {head:?}");
    Ok(0)
}
