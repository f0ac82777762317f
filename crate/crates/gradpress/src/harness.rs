//! Desk-scale training problems with exact-gradient oracles, data
//! partitioning across workers, metric collection, and experiment
//! orchestration.
//!
//! Problems evaluate losses and gradients in f64; parameters travel as
//! f32 vectors. Every run is a pure function of its configuration and
//! seed: data shuffles, gradient noise, and initialization all draw from
//! counter-based streams.

use crate::analysis::MomentGapSample;
use crate::compress::CompressorKind;
use crate::error::{Error, Result};
use crate::optim::{
    clan_iteration, nag_ef_step, ClanReplica, LansConfig, LrSchedule, NagConfig, NagState,
    ScalingFn,
};
use crate::partition::BlockPartition;
use crate::protocol::{
    local_reduce, tcp::TcpCluster, AggregationConfig, InProcessCluster, RoundContext,
    RoundFabric, RoundInput, TensorId, TensorSpec,
};
use crate::rng::{stage, DeterministicRng, StreamKey};
use crate::vector::GradientVector;
use std::time::Instant;

// ---------------------------------------------------------------------
// Problems
// ---------------------------------------------------------------------

/// Diagonal quadratic `F(x) = 1/2 sum_j a_j (x_j - x*_j)^2`, shifted so
/// the minimum value is zero. Diagonal curvature keeps the
/// coordinate-wise smoothness constants exact: `L_j = a_j`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    diag: Vec<f64>,
    minimizer: Vec<f64>,
    noise_sigma: f64,
}

/// Binary logistic regression on synthetic Gaussian features with a
/// planted separator and optional label flips.
#[derive(Debug, Clone)]
pub struct Logistic {
    features: Vec<f32>, // row-major [samples x dim]
    labels: Vec<f32>,   // +1 / -1
    dim: usize,
    reg: f64,
}

/// One-hidden-layer tanh regressor trained with squared loss against a
/// fixed random teacher network.
#[derive(Debug, Clone)]
pub struct Mlp {
    inputs: Vec<f64>, // row-major [samples x input_dim]
    targets: Vec<f64>,
    input_dim: usize,
    hidden: usize,
}

#[derive(Debug, Clone)]
pub enum Problem {
    Quadratic(Quadratic),
    Logistic(Logistic),
    Mlp(Mlp),
}

impl Problem {
    /// Conditioned diagonal quadratic: curvatures spread linearly over
    /// [1, condition], minimizer drawn from the init stream.
    pub fn quadratic(dim: usize, condition: f64, noise_sigma: f64, seed: u64) -> Self {
        let mut rng = DeterministicRng::new(StreamKey::new(seed).stage(stage::INIT).tensor(1));
        let diag: Vec<f64> = (0..dim)
            .map(|j| {
                if dim == 1 {
                    1.0
                } else {
                    1.0 + (condition - 1.0) * j as f64 / (dim - 1) as f64
                }
            })
            .collect();
        let minimizer: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
        Problem::Quadratic(Quadratic { diag, minimizer, noise_sigma })
    }

    pub fn logistic(dim: usize, samples: usize, reg: f64, flip_prob: f64, seed: u64) -> Self {
        let mut rng = DeterministicRng::new(StreamKey::new(seed).stage(stage::INIT).tensor(2));
        let separator: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
        let mut features = Vec::with_capacity(samples * dim);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let mut margin = 0.0;
            for s in separator.iter().take(dim) {
                let x = rng.next_normal();
                features.push(x as f32);
                margin += s * x;
            }
            let mut y = if margin >= 0.0 { 1.0f32 } else { -1.0f32 };
            if rng.next_f64() < flip_prob {
                y = -y;
            }
            labels.push(y);
        }
        Problem::Logistic(Logistic { features, labels, dim, reg })
    }

    pub fn mlp(input_dim: usize, hidden: usize, samples: usize, seed: u64) -> Self {
        let mut rng = DeterministicRng::new(StreamKey::new(seed).stage(stage::INIT).tensor(3));
        let teacher: Vec<f64> = (0..mlp_dim(input_dim, hidden))
            .map(|_| rng.next_normal() * 0.7)
            .collect();
        let mut inputs = Vec::with_capacity(samples * input_dim);
        let mut targets = Vec::with_capacity(samples);
        for _ in 0..samples {
            let row: Vec<f64> = (0..input_dim).map(|_| rng.next_normal()).collect();
            let (o, _, _) = mlp_forward(&teacher, &row, input_dim, hidden);
            inputs.extend_from_slice(&row);
            targets.push(o);
        }
        Problem::Mlp(Mlp { inputs, targets, input_dim, hidden })
    }

    pub fn dim(&self) -> usize {
        match self {
            Problem::Quadratic(q) => q.diag.len(),
            Problem::Logistic(l) => l.dim,
            Problem::Mlp(m) => mlp_dim(m.input_dim, m.hidden),
        }
    }

    /// Finite dataset size; the quadratic draws virtual noise samples.
    pub fn sample_count(&self) -> Option<u64> {
        match self {
            Problem::Quadratic(_) => None,
            Problem::Logistic(l) => Some(l.labels.len() as u64),
            Problem::Mlp(m) => Some(m.targets.len() as u64),
        }
    }

    /// All three synthetic problems carry analytic full-batch gradients.
    pub fn exact_gradient_available(&self) -> bool {
        true
    }

    /// Per-coordinate smoothness constants, when exactly known.
    pub fn lipschitz(&self) -> Option<Vec<f64>> {
        match self {
            Problem::Quadratic(q) => Some(q.diag.clone()),
            _ => None,
        }
    }

    /// Full-batch loss at `x` (f64 throughout).
    pub fn loss(&self, x: &[f64]) -> f64 {
        match self {
            Problem::Quadratic(q) => {
                0.5 * q
                    .diag
                    .iter()
                    .zip(&q.minimizer)
                    .zip(x)
                    .map(|((a, m), xj)| a * (xj - m) * (xj - m))
                    .sum::<f64>()
            }
            Problem::Logistic(l) => {
                let n = l.labels.len();
                let mut total = 0.0;
                for i in 0..n {
                    let z = l.margin(x, i);
                    total += softplus(-z);
                }
                total / n as f64 + 0.5 * l.reg * x.iter().map(|v| v * v).sum::<f64>()
            }
            Problem::Mlp(m) => {
                let n = m.targets.len();
                let mut total = 0.0;
                for i in 0..n {
                    let row = &m.inputs[i * m.input_dim..(i + 1) * m.input_dim];
                    let (o, _, _) = mlp_forward(x, row, m.input_dim, m.hidden);
                    let e = o - m.targets[i];
                    total += 0.5 * e * e;
                }
                total / n as f64
            }
        }
    }

    /// Exact full-batch gradient at `x`.
    pub fn full_gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Problem::Quadratic(q) => q
                .diag
                .iter()
                .zip(&q.minimizer)
                .zip(x)
                .map(|((a, m), xj)| a * (xj - m))
                .collect(),
            Problem::Logistic(l) => {
                let n = l.labels.len();
                let mut grad = vec![0.0f64; l.dim];
                for i in 0..n {
                    l.accumulate_sample_gradient(x, i, &mut grad);
                }
                for (g, xj) in grad.iter_mut().zip(x) {
                    *g = *g / n as f64 + l.reg * xj;
                }
                grad
            }
            Problem::Mlp(m) => {
                let n = m.targets.len();
                let mut grad = vec![0.0f64; self.dim()];
                for i in 0..n {
                    m.accumulate_sample_gradient(x, i, &mut grad);
                }
                for g in grad.iter_mut() {
                    *g /= n as f64;
                }
                grad
            }
        }
    }

    /// Mini-batch gradient over global sample slots
    /// `[range.start, range.end)` of step `step`. Dataset problems index
    /// the step's shuffled permutation; the quadratic draws one noise
    /// vector per slot. Unbiased by construction.
    pub fn batch_gradient(
        &self,
        x: &[f64],
        step: u64,
        seed: u64,
        range: std::ops::Range<u64>,
        permutation: Option<&[u32]>,
    ) -> Result<Vec<f64>> {
        let count = (range.end - range.start) as f64;
        if count == 0.0 {
            return Err(Error::Config("empty batch".into()));
        }
        match self {
            Problem::Quadratic(q) => {
                let mut grad = self.full_gradient(x);
                if q.noise_sigma > 0.0 {
                    let mut noise_mean = vec![0.0f64; grad.len()];
                    for slot in range.clone() {
                        let mut rng = DeterministicRng::new(
                            StreamKey::new(seed)
                                .stage(stage::NOISE)
                                .iteration(step)
                                .tensor(slot as u32),
                        );
                        for nm in noise_mean.iter_mut() {
                            *nm += q.noise_sigma * rng.next_normal();
                        }
                    }
                    for (g, nm) in grad.iter_mut().zip(&noise_mean) {
                        *g += nm / count;
                    }
                }
                Ok(grad)
            }
            Problem::Logistic(l) => {
                let perm = permutation.ok_or(Error::Config("missing permutation".into()))?;
                let mut grad = vec![0.0f64; l.dim];
                for slot in range.clone() {
                    let i = perm[slot as usize] as usize;
                    l.accumulate_sample_gradient(x, i, &mut grad);
                }
                for (g, xj) in grad.iter_mut().zip(x) {
                    *g = *g / count + l.reg * xj;
                }
                Ok(grad)
            }
            Problem::Mlp(m) => {
                let perm = permutation.ok_or(Error::Config("missing permutation".into()))?;
                let mut grad = vec![0.0f64; self.dim()];
                for slot in range.clone() {
                    let i = perm[slot as usize] as usize;
                    m.accumulate_sample_gradient(x, i, &mut grad);
                }
                for g in grad.iter_mut() {
                    *g /= count;
                }
                Ok(grad)
            }
        }
    }

    /// Initial parameter vector from the init stream.
    pub fn initial_params(&self, seed: u64) -> GradientVector {
        let mut rng = DeterministicRng::new(StreamKey::new(seed).stage(stage::INIT).tensor(0));
        GradientVector::new(
            (0..self.dim()).map(|_| rng.next_normal() as f32).collect(),
        )
        .expect("normal draws are finite")
    }

    /// The step's sample permutation (dataset problems only).
    pub fn permutation(&self, step: u64, seed: u64) -> Option<Vec<u32>> {
        let n = self.sample_count()? as usize;
        let mut perm: Vec<u32> = (0..n as u32).collect();
        let mut rng = DeterministicRng::new(
            StreamKey::new(seed).stage(stage::DATA_SHUFFLE).iteration(step),
        );
        for i in (1..n).rev() {
            let j = rng.next_range(i as u64 + 1) as usize;
            perm.swap(i, j);
        }
        Some(perm)
    }
}

impl Logistic {
    fn margin(&self, x: &[f64], i: usize) -> f64 {
        let row = &self.features[i * self.dim..(i + 1) * self.dim];
        self.labels[i] as f64
            * row.iter().zip(x).map(|(f, xj)| *f as f64 * xj).sum::<f64>()
    }

    /// Adds the data part of sample i's gradient (regularizer excluded).
    fn accumulate_sample_gradient(&self, x: &[f64], i: usize, grad: &mut [f64]) {
        let z = self.margin(x, i);
        let coeff = -(self.labels[i] as f64) * sigmoid(-z);
        let row = &self.features[i * self.dim..(i + 1) * self.dim];
        for (g, f) in grad.iter_mut().zip(row) {
            *g += coeff * *f as f64;
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softplus(z: f64) -> f64 {
    // ln(1 + e^z) without overflow.
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn mlp_dim(input_dim: usize, hidden: usize) -> usize {
    hidden * input_dim + hidden + hidden + 1
}

/// Forward pass: returns (output, hidden activations, pre-activations).
fn mlp_forward(params: &[f64], row: &[f64], input_dim: usize, hidden: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let (w1, rest) = params.split_at(hidden * input_dim);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(hidden);
    let mut z = vec![0.0f64; hidden];
    for h in 0..hidden {
        let mut acc = b1[h];
        let wrow = &w1[h * input_dim..(h + 1) * input_dim];
        for (w, xi) in wrow.iter().zip(row) {
            acc += w * xi;
        }
        z[h] = acc;
    }
    let a: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
    let o = b2[0] + w2.iter().zip(&a).map(|(w, ai)| w * ai).sum::<f64>();
    (o, a, z)
}

impl Mlp {
    fn accumulate_sample_gradient(&self, params: &[f64], i: usize, grad: &mut [f64]) {
        let row = &self.inputs[i * self.input_dim..(i + 1) * self.input_dim];
        let (o, a, _) = mlp_forward(params, row, self.input_dim, self.hidden);
        let e = o - self.targets[i];
        let hidden = self.hidden;
        let input_dim = self.input_dim;
        let w2 = &params[hidden * input_dim + hidden..hidden * input_dim + 2 * hidden];
        let (gw1, rest) = grad.split_at_mut(hidden * input_dim);
        let (gb1, rest) = rest.split_at_mut(hidden);
        let (gw2, gb2) = rest.split_at_mut(hidden);
        for h in 0..hidden {
            let dz = e * w2[h] * (1.0 - a[h] * a[h]);
            for (gw, xi) in gw1[h * input_dim..(h + 1) * input_dim].iter_mut().zip(row) {
                *gw += dz * xi;
            }
            gb1[h] += dz;
            gw2[h] += e * a[h];
        }
        gb2[0] += e;
    }
}

/// Max over coordinates of the relative error between the analytic
/// gradient and a central finite difference of the loss.
pub fn finite_difference_check(problem: &Problem, x: &[f64], h: f64) -> f64 {
    let analytic = problem.full_gradient(x);
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let up = problem.loss(&xp);
        xp[j] = x[j] - h;
        let down = problem.loss(&xp);
        xp[j] = x[j];
        let fd = (up - down) / (2.0 * h);
        let denom = analytic[j].abs().max(1.0);
        worst = worst.max((fd - analytic[j]).abs() / denom);
    }
    worst
}

// ---------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Quadratic {
        dim: usize,
        #[serde(default = "default_condition")]
        condition: f64,
        #[serde(default)]
        noise_sigma: f64,
    },
    Logistic {
        dim: usize,
        samples: usize,
        #[serde(default = "default_reg")]
        reg: f64,
        #[serde(default = "default_flip")]
        flip_prob: f64,
    },
    Mlp {
        input_dim: usize,
        hidden: usize,
        samples: usize,
    },
}

fn default_condition() -> f64 {
    100.0
}
fn default_reg() -> f64 {
    1e-3
}
fn default_flip() -> f64 {
    0.05
}

impl ProblemConfig {
    pub fn build(&self, seed: u64) -> Problem {
        match *self {
            ProblemConfig::Quadratic { dim, condition, noise_sigma } => {
                Problem::quadratic(dim, condition, noise_sigma, seed)
            }
            ProblemConfig::Logistic { dim, samples, reg, flip_prob } => {
                Problem::logistic(dim, samples, reg, flip_prob, seed)
            }
            ProblemConfig::Mlp { input_dim, hidden, samples } => {
                Problem::mlp(input_dim, hidden, samples, seed)
            }
        }
    }
}

/// Learning-rate specification resolved against the horizon.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSpec {
    Constant { eta: f64 },
    /// `eta = 1/sqrt(T)`: the rate-analysis setting.
    InvSqrtHorizon,
    /// `eta_t = eta0 / sqrt(t)`: per-step annealing.
    InvSqrtStep { eta0: f64 },
}

impl LrSpec {
    fn schedule(&self, steps: u64) -> LrSchedule {
        match *self {
            LrSpec::Constant { eta } => LrSchedule::Constant(eta),
            LrSpec::InvSqrtHorizon => LrSchedule::Constant(1.0 / (steps.max(1) as f64).sqrt()),
            LrSpec::InvSqrtStep { eta0 } => LrSchedule::Steps(
                (1..=steps.max(1)).map(|t| eta0 / (t as f64).sqrt()).collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// The layer-wise adaptive method; with compression enabled this is
    /// the compressed variant.
    Lans {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default)]
        weight_decay: f64,
        lr: LrSpec,
        #[serde(default = "default_alpha_l")]
        alpha_l: f64,
        #[serde(default = "default_alpha_u")]
        alpha_u: f64,
        /// Block sizes of the layer partition; one block when absent.
        #[serde(default)]
        blocks: Option<Vec<usize>>,
    },
    /// Nesterov momentum baseline (optionally with compressed
    /// aggregation and error feedback).
    Nag {
        #[serde(default = "default_momentum")]
        momentum: f64,
        lr: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-6
}
fn default_alpha_l() -> f64 {
    0.01
}
fn default_alpha_u() -> f64 {
    10.0
}
fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransportConfig {
    InProcess,
    /// Loopback TCP shard servers spawned per run.
    Tcp {
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_timeout_secs() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub optimizer: OptimizerConfig,
    pub aggregation: AggregationConfig,
    /// Per-worker batch size s.
    pub batch_size: u64,
    /// Step count T.
    pub steps: u64,
    pub seed: u64,
    #[serde(default = "default_transport")]
    pub transport: TransportConfig,
    /// Record the per-step moment/estimate/oracle trace for monitors.
    #[serde(default)]
    pub record_trace: bool,
    /// Record wall-clock phase timings in the metrics (off by default so
    /// metric files are byte-reproducible).
    #[serde(default)]
    pub record_timing: bool,
}

fn default_transport() -> TransportConfig {
    TransportConfig::InProcess
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.aggregation.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.batch_size % self.aggregation.local_devices as u64 != 0 {
            return Err(Error::Config(
                "batch_size must divide evenly across local devices".into(),
            ));
        }
        let problem = self.problem.build(self.seed);
        let per_step = self.batch_size * self.aggregation.n_workers as u64;
        if let Some(n) = problem.sample_count() {
            if per_step > n {
                return Err(Error::Config(format!(
                    "step consumes {per_step} samples but the dataset has {n}"
                )));
            }
        }
        if let OptimizerConfig::Lans { blocks: Some(ref blocks), .. } = self.optimizer {
            crate::partition::make_partition(problem.dim(), blocks)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------

/// One row per optimizer step. `loss` is the full-batch loss after the
/// step; `grad_sq_norm` is the exact squared gradient norm at the
/// pre-step iterate. Byte counters are per worker.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_sq_norm: f64,
    pub bytes_push: u64,
    pub bytes_pull: u64,
    pub max_worker_residual: f64,
    pub server_residual: f64,
    pub phase_ms_compute: f64,
    pub phase_ms_comm: f64,
}

pub const METRICS_HEADER: &str = "step,loss,grad_sq_norm,bytes_push,bytes_pull,max_worker_residual,server_residual,phase_ms_compute,phase_ms_comm";

pub fn write_metrics_csv(out: &mut impl std::io::Write, records: &[MetricsRecord]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.loss,
            r.grad_sq_norm,
            r.bytes_push,
            r.bytes_pull,
            r.max_worker_residual,
            r.server_residual,
            r.phase_ms_compute,
            r.phase_ms_comm
        )?;
    }
    Ok(())
}

/// End-of-run aggregates.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub final_grad_sq_norm: f64,
    /// Mean over steps of the pre-step squared gradient norm.
    pub avg_grad_sq_norm: f64,
    pub total_push_bytes: u64,
    pub total_pull_bytes: u64,
    pub max_worker_residual: f64,
    pub max_server_residual: f64,
    /// Largest |g_j| seen across all worker gradients.
    pub max_abs_gradient: f64,
    /// Smallest certified contraction factor over the run, if any
    /// contractive compressions happened.
    pub min_certified_delta: Option<f64>,
}

pub fn write_summary_csv(out: &mut impl std::io::Write, s: &RunSummary) -> Result<()> {
    writeln!(
        out,
        "steps,final_loss,final_grad_sq_norm,avg_grad_sq_norm,total_push_bytes,total_pull_bytes,max_worker_residual,max_server_residual,max_abs_gradient,min_certified_delta"
    )?;
    writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{}",
        s.steps,
        s.final_loss,
        s.final_grad_sq_norm,
        s.avg_grad_sq_norm,
        s.total_push_bytes,
        s.total_pull_bytes,
        s.max_worker_residual,
        s.max_server_residual,
        s.max_abs_gradient,
        s.min_certified_delta.map_or_else(|| "none".to_string(), |d| d.to_string()),
    )?;
    Ok(())
}

#[derive(Debug)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub final_params: GradientVector,
    /// Per-step monitor samples when `record_trace` was set.
    pub trace: Option<Vec<MomentGapSample>>,
}

// ---------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------

enum Fabric {
    InProcess(InProcessCluster),
    Tcp(TcpCluster),
}

impl RoundFabric for Fabric {
    fn run_round(&mut self, input: &RoundInput, ctx: &RoundContext) -> Result<crate::protocol::RoundReport> {
        match self {
            Fabric::InProcess(c) => c.run_round(input, ctx),
            Fabric::Tcp(c) => c.run_round(input, ctx),
        }
    }

    fn config(&self) -> &AggregationConfig {
        match self {
            Fabric::InProcess(c) => c.config(),
            Fabric::Tcp(c) => c.config(),
        }
    }
}

enum OptimizerDriver {
    Lans { cfg: LansConfig, replicas: Vec<ClanReplica> },
    Nag { cfg: NagConfig, states: Vec<NagState>, params: Vec<GradientVector>, partition: BlockPartition },
}

/// Run one experiment end to end. Deterministic for a given config.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let problem = cfg.problem.build(cfg.seed);
    let d = problem.dim();
    let n = cfg.aggregation.n_workers as usize;
    let x0 = problem.initial_params(cfg.seed);

    let partition = match &cfg.optimizer {
        OptimizerConfig::Lans { blocks: Some(blocks), .. } => {
            crate::partition::make_partition(d, blocks)?
        }
        _ => BlockPartition::single(d)?,
    };
    let specs: Vec<TensorSpec> = partition
        .ranges()
        .enumerate()
        .map(|(b, r)| TensorSpec { id: b as TensorId, dim: r.len() })
        .collect();
    let mut fabric = match cfg.transport {
        TransportConfig::InProcess => {
            Fabric::InProcess(InProcessCluster::new(cfg.aggregation, &specs)?)
        }
        TransportConfig::Tcp { timeout_secs } => Fabric::Tcp(TcpCluster::spawn_local(
            cfg.aggregation,
            &specs,
            cfg.seed,
            std::time::Duration::from_secs(timeout_secs),
        )?),
    };

    let mut driver = match &cfg.optimizer {
        OptimizerConfig::Lans {
            beta1,
            beta2,
            epsilon,
            weight_decay,
            lr,
            alpha_l,
            alpha_u,
            ..
        } => {
            let lans = LansConfig {
                beta1: *beta1,
                beta2: *beta2,
                epsilon: *epsilon,
                weight_decay: *weight_decay,
                schedule: lr.schedule(cfg.steps),
                scaling: ScalingFn { alpha_l: *alpha_l, alpha_u: *alpha_u },
                partition: partition.clone(),
            };
            lans.validate()?;
            OptimizerDriver::Lans {
                cfg: lans,
                replicas: (0..n).map(|_| ClanReplica::new(x0.clone())).collect(),
            }
        }
        OptimizerConfig::Nag { momentum, lr } => {
            let nag = NagConfig { momentum: *momentum, lr: *lr };
            nag.validate()?;
            OptimizerDriver::Nag {
                cfg: nag,
                states: (0..n).map(|_| NagState::new(d)).collect(),
                params: (0..n).map(|_| x0.clone()).collect(),
                partition: partition.clone(),
            }
        }
    };

    let devices = cfg.aggregation.local_devices as u64;
    let mut metrics = Vec::with_capacity(cfg.steps as usize);
    let mut trace = if cfg.record_trace { Some(Vec::with_capacity(cfg.steps as usize)) } else { None };
    let mut grad_sq_sum = 0.0f64;
    let mut total_push = 0u64;
    let mut total_pull = 0u64;
    let mut max_worker_residual = 0.0f64;
    let mut max_server_residual = 0.0f64;
    let mut max_abs_gradient = 0.0f64;
    let mut min_delta: Option<f64> = None;

    for step in 1..=cfg.steps {
        let compute_start = Instant::now();
        let current = match &driver {
            OptimizerDriver::Lans { replicas, .. } => replicas[0].params.clone(),
            OptimizerDriver::Nag { params, .. } => params[0].clone(),
        };
        let x64 = current.to_f64();
        let oracle_grad = problem.full_gradient(&x64);
        let grad_sq: f64 = oracle_grad.iter().map(|g| g * g).sum();
        grad_sq_sum += grad_sq;

        let permutation = problem.permutation(step, cfg.seed);
        let mut worker_grads = Vec::with_capacity(n);
        for w in 0..n {
            let base = w as u64 * cfg.batch_size;
            let per_device = cfg.batch_size / devices;
            let device_grads: Vec<GradientVector> = (0..devices)
                .map(|dev| {
                    let start = base + dev * per_device;
                    let g = problem.batch_gradient(
                        &x64,
                        step,
                        cfg.seed,
                        start..start + per_device,
                        permutation.as_deref(),
                    )?;
                    GradientVector::from_f64(&g)
                })
                .collect::<Result<_>>()?;
            worker_grads.push(local_reduce(&device_grads)?);
        }
        for g in &worker_grads {
            max_abs_gradient = max_abs_gradient.max(g.linf_norm());
        }
        let phase_compute = compute_start.elapsed().as_secs_f64() * 1e3;

        let comm_start = Instant::now();
        let ctx = RoundContext { seed: cfg.seed, iteration: step };
        let round = match &mut driver {
            OptimizerDriver::Lans { cfg: lans, replicas } => {
                let report = clan_iteration(lans, replicas, &mut fabric, &worker_grads, &ctx)?;
                if let Some(t) = trace.as_mut() {
                    t.push(MomentGapSample {
                        mhat: replicas[0].lans.mhat().to_vec(),
                        estimate: report.aggregated.to_f64(),
                        oracle_grad: oracle_grad.clone(),
                    });
                }
                report.round
            }
            OptimizerDriver::Nag { cfg: nag, states, params, partition } => {
                let mut input = RoundInput::default();
                for (b, _) in partition.ranges().enumerate() {
                    input.gradients.insert(b as TensorId, Vec::with_capacity(n));
                }
                for g in &worker_grads {
                    for (b, block) in crate::optim::split_blocks(partition, g)
                        .into_iter()
                        .enumerate()
                    {
                        input.gradients.get_mut(&(b as TensorId)).unwrap().push(block);
                    }
                }
                let report = fabric.run_round(&input, &ctx)?;
                let aggregated = crate::optim::join_blocks(partition, &report.outputs)?;
                for (state, p) in states.iter_mut().zip(params.iter_mut()) {
                    *p = nag_ef_step(nag, state, p, &aggregated)?;
                }
                report
            }
        };
        let phase_comm = comm_start.elapsed().as_secs_f64() * 1e3;

        total_push += round.push_bytes_per_worker;
        total_pull += round.pull_bytes_per_worker;
        max_worker_residual = max_worker_residual.max(round.max_worker_residual);
        max_server_residual = max_server_residual.max(round.max_server_residual);
        if let Some(dmin) = round.min_certified_delta {
            min_delta = Some(min_delta.map_or(dmin, |m| m.min(dmin)));
        }

        let post = match &driver {
            OptimizerDriver::Lans { replicas, .. } => replicas[0].params.to_f64(),
            OptimizerDriver::Nag { params, .. } => params[0].to_f64(),
        };
        metrics.push(MetricsRecord {
            step,
            loss: problem.loss(&post),
            grad_sq_norm: grad_sq,
            bytes_push: round.push_bytes_per_worker,
            bytes_pull: round.pull_bytes_per_worker,
            max_worker_residual: round.max_worker_residual,
            server_residual: round.max_server_residual,
            phase_ms_compute: if cfg.record_timing { phase_compute } else { 0.0 },
            phase_ms_comm: if cfg.record_timing { phase_comm } else { 0.0 },
        });
    }

    let final_params = match &driver {
        OptimizerDriver::Lans { replicas, .. } => replicas[0].params.clone(),
        OptimizerDriver::Nag { params, .. } => params[0].clone(),
    };
    let final64 = final_params.to_f64();
    let final_grad = problem.full_gradient(&final64);
    let summary = RunSummary {
        steps: cfg.steps,
        final_loss: problem.loss(&final64),
        final_grad_sq_norm: final_grad.iter().map(|g| g * g).sum(),
        avg_grad_sq_norm: if cfg.steps > 0 { grad_sq_sum / cfg.steps as f64 } else { 0.0 },
        total_push_bytes: total_push,
        total_pull_bytes: total_pull,
        max_worker_residual,
        max_server_residual,
        max_abs_gradient,
        min_certified_delta: min_delta,
    };
    Ok(RunOutput { metrics, summary, final_params, trace })
}

/// Convenience: the default compressed-run aggregation settings used by
/// experiments (threshold disabled so small desk-scale tensors compress).
pub fn desk_aggregation(
    mode: crate::protocol::AggregationMode,
    compressor: CompressorKind,
    n_workers: u32,
) -> AggregationConfig {
    AggregationConfig {
        mode,
        compressor,
        size_threshold_bytes: 0,
        n_workers,
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::AggregationMode;

    #[test]
    fn quadratic_finite_difference_is_tight() {
        let p = Problem::quadratic(20, 100.0, 0.0, 3);
        let x = p.initial_params(3).to_f64();
        assert!(finite_difference_check(&p, &x, 1e-3) <= 1e-6);
    }

    #[test]
    fn logistic_finite_difference_at_zero() {
        let p = Problem::logistic(10, 200, 1e-3, 0.05, 4);
        let x = vec![0.0; 10];
        assert!(finite_difference_check(&p, &x, 1e-4) <= 1e-4);
    }

    #[test]
    fn mlp_finite_difference_random_init() {
        let p = Problem::mlp(5, 4, 64, 5);
        let x = p.initial_params(5).to_f64();
        assert!(finite_difference_check(&p, &x, 1e-4) <= 1e-3);
    }

    #[test]
    fn quadratic_minimum_is_zero_loss() {
        let p = Problem::quadratic(8, 10.0, 0.0, 6);
        if let Problem::Quadratic(q) = &p {
            assert!(p.loss(&q.minimizer) == 0.0);
            let g = p.full_gradient(&q.minimizer);
            assert!(g.iter().all(|v| v.abs() < 1e-12));
        } else {
            unreachable!();
        }
    }

    #[test]
    fn batch_noise_is_unbiased_for_quadratic() {
        let p = Problem::quadratic(4, 2.0, 0.5, 7);
        let x = vec![1.0; 4];
        let exact = p.full_gradient(&x);
        let mut mean = vec![0.0f64; 4];
        let reps = 4000u64;
        for step in 0..reps {
            let g = p.batch_gradient(&x, step, 7, 0..4, None).unwrap();
            for (m, gj) in mean.iter_mut().zip(&g) {
                *m += gj;
            }
        }
        for (m, e) in mean.iter().zip(&exact) {
            assert!((m / reps as f64 - e).abs() < 0.02, "{} vs {}", m / reps as f64, e);
        }
    }

    #[test]
    fn permutation_covers_disjoint_batches() {
        let p = Problem::logistic(5, 100, 1e-3, 0.0, 8);
        let perm = p.permutation(3, 8).unwrap();
        let mut seen = vec![false; 100];
        for idx in &perm {
            assert!(!seen[*idx as usize], "duplicate sample");
            seen[*idx as usize] = true;
        }
        assert!(seen.iter().all(|s| *s));
        // Same step, same permutation; different step differs.
        assert_eq!(perm, p.permutation(3, 8).unwrap());
        assert_ne!(perm, p.permutation(4, 8).unwrap());
    }

    fn tiny_run(steps: u64) -> RunConfig {
        RunConfig {
            problem: ProblemConfig::Quadratic { dim: 6, condition: 10.0, noise_sigma: 0.0 },
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
            aggregation: desk_aggregation(AggregationMode::FullPrecision, CompressorKind::None, 2),
            batch_size: 2,
            steps,
            seed: 11,
            transport: TransportConfig::InProcess,
            record_trace: false,
            record_timing: false,
        }
    }

    #[test]
    fn zero_steps_leaves_parameters_untouched() {
        let cfg = tiny_run(0);
        let out = run_experiment(&cfg).unwrap();
        assert!(out.metrics.is_empty());
        let p = cfg.problem.build(cfg.seed);
        assert_eq!(out.final_params, p.initial_params(cfg.seed));
    }

    #[test]
    fn identical_seeds_give_bit_identical_metric_streams() {
        let cfg = tiny_run(25);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn noiseless_quadratic_loss_descends() {
        let cfg = tiny_run(300);
        let out = run_experiment(&cfg).unwrap();
        let first = out.metrics.first().unwrap().loss;
        let last = out.summary.final_loss;
        assert!(last < first * 0.5, "first {first} last {last}");
    }

    #[test]
    fn byte_accounting_matches_size_formula() {
        let mut cfg = tiny_run(10);
        cfg.aggregation = desk_aggregation(
            AggregationMode::CompressedEf,
            CompressorKind::ScaledSign,
            2,
        );
        let out = run_experiment(&cfg).unwrap();
        // d=6 scaled sign: 24-byte header + 4-byte scale + 1 sign byte.
        let per_msg = 24 + 4 + 1;
        assert_eq!(out.summary.total_push_bytes, 10 * per_msg);
        assert_eq!(out.summary.total_pull_bytes, 10 * per_msg);
        for r in &out.metrics {
            assert_eq!(r.bytes_push, per_msg);
            assert_eq!(r.bytes_pull, per_msg);
        }
    }

    #[test]
    fn config_validation_failures() {
        let mut cfg = tiny_run(5);
        cfg.batch_size = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_run(5);
        cfg.problem = ProblemConfig::Logistic { dim: 4, samples: 3, reg: 1e-3, flip_prob: 0.0 };
        cfg.batch_size = 2; // 2 workers x 2 > 3 samples
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
