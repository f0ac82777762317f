//! Gradient-aggregation protocols between workers and server shards.
//!
//! Three modes share one state machine: full precision, two-way
//! compression, and two-way compression with error feedback. Rounds are
//! bulk-synchronous; a shard finalizes a tensor only after all `n` worker
//! messages arrive, and it reduces decoded messages in worker-id order
//! with 64-bit accumulation, so results never depend on arrival order,
//! thread count, or transport.
//!
//! Residual errors are kept in f64 so the reconstruction identities
//! `q = decompress(delta) + e'` and `Delta = decompress(p) + e_server'`
//! hold exactly along the trajectory.

pub mod tcp;

use crate::compress::{
    compress, decompress, delta_lower_bound, fused_error_update, CompressedMessage,
    CompressorKind, FRAME_HEADER_LEN,
};
use crate::error::{Error, Result};
use crate::rng::{stage, DeterministicRng, StreamKey};
use crate::vector::{mean_of, GradientVector};
use std::collections::{BTreeMap, HashMap};

pub type TensorId = u32;

/// Aggregation behavior for a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    FullPrecision,
    Compressed,
    CompressedEf,
}

/// How tensors map onto server shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardPolicy {
    /// `shard = tensor_id mod shard_count`.
    #[default]
    Modulo,
    /// Greedy largest-first packing of encoded tensor sizes, so per-shard
    /// compressed byte loads differ by at most one tensor.
    SizeBalanced,
}

/// Static configuration of the aggregation fabric.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub mode: AggregationMode,
    pub compressor: CompressorKind,
    /// Tensors whose raw f32 size is below this bypass compression.
    pub size_threshold_bytes: u64,
    pub shard_count: u32,
    pub n_workers: u32,
    pub shard_policy: ShardPolicy,
    /// Simulated local devices per worker; device gradients take an
    /// f32 -> f16 -> f32 round trip and are averaged locally before the
    /// inter-node path. 1 disables the stage.
    pub local_devices: u32,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            mode: AggregationMode::FullPrecision,
            compressor: CompressorKind::None,
            size_threshold_bytes: 1 << 20,
            shard_count: 1,
            n_workers: 1,
            shard_policy: ShardPolicy::Modulo,
            local_devices: 1,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_workers == 0 {
            return Err(Error::Config("n_workers must be positive".into()));
        }
        if self.shard_count == 0 {
            return Err(Error::Config("shard_count must be positive".into()));
        }
        if self.local_devices == 0 {
            return Err(Error::Config("local_devices must be positive".into()));
        }
        if self.mode == AggregationMode::Compressed && self.compressor.is_contractive() {
            log::warn!(
                "compressor {} is biased; the plain compressed path has no error feedback",
                self.compressor.name()
            );
        }
        Ok(())
    }

    /// Compressor actually applied to a length-`d` tensor: the size
    /// threshold routes small tensors through the raw f32 path.
    pub fn effective_kind(&self, d: usize) -> CompressorKind {
        match self.mode {
            AggregationMode::FullPrecision => CompressorKind::None,
            _ => {
                if (4 * d as u64) < self.size_threshold_bytes {
                    CompressorKind::None
                } else {
                    self.compressor
                }
            }
        }
    }
}

/// Seed and iteration stamp shared by every stream of one round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext {
    pub seed: u64,
    pub iteration: u64,
}

impl RoundContext {
    fn push_rng(&self, worker: u32, tensor: TensorId) -> DeterministicRng {
        DeterministicRng::new(
            StreamKey::new(self.seed)
                .node(worker)
                .iteration(self.iteration)
                .tensor(tensor)
                .stage(stage::PUSH),
        )
    }

    fn pull_rng(&self, shard: u32, tensor: TensorId) -> DeterministicRng {
        DeterministicRng::new(
            StreamKey::new(self.seed)
                .node(shard)
                .iteration(self.iteration)
                .tensor(tensor)
                .stage(stage::PULL),
        )
    }
}

/// Per-worker protocol state: the residual compression errors, one per
/// tensor, plus push-side statistics for the current round.
#[derive(Debug)]
pub struct WorkerState {
    worker_id: u32,
    residuals: HashMap<TensorId, Vec<f64>>,
}

impl WorkerState {
    pub fn new(worker_id: u32) -> Self {
        Self { worker_id, residuals: HashMap::new() }
    }

    pub fn worker_id(&self) -> u32 {
        self.worker_id
    }

    /// l2 norm of the residual for one tensor (0 if never compressed).
    pub fn residual_norm(&self, tensor: TensorId) -> f64 {
        self.residuals
            .get(&tensor)
            .map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }

    pub fn max_residual_norm(&self) -> f64 {
        self.residuals
            .keys()
            .map(|t| self.residual_norm(*t))
            .fold(0.0, f64::max)
    }

    pub fn residual(&self, tensor: TensorId) -> Option<&[f64]> {
        self.residuals.get(&tensor).map(|v| v.as_slice())
    }
}

/// Outcome of one worker push: the message plus its certified contraction
/// factor when the kind is delta-approximate.
#[derive(Debug)]
pub struct PushOutcome {
    pub msg: CompressedMessage,
    pub certified_delta: Option<f64>,
}

/// Worker-side half of one aggregation: corrects with the residual (EF
/// mode), compresses, and updates the residual. Pure in everything but
/// the worker state; both transports call this.
pub fn worker_prepare_push(
    cfg: &AggregationConfig,
    worker: &mut WorkerState,
    tensor: TensorId,
    gradient: &GradientVector,
    ctx: &RoundContext,
) -> Result<PushOutcome> {
    let kind = cfg.effective_kind(gradient.len());
    let rng = ctx.push_rng(worker.worker_id, tensor);
    let use_ef = cfg.mode == AggregationMode::CompressedEf && kind != CompressorKind::None;
    if !use_ef {
        // Full precision, plain compressed, or threshold bypass:
        // residuals are never touched.
        let msg = compress(kind, gradient, &rng)?;
        let certified_delta = certified_delta(kind, gradient);
        return Ok(PushOutcome { msg, certified_delta });
    }
    let d = gradient.len();
    let residual = worker
        .residuals
        .entry(tensor)
        .or_insert_with(|| vec![0.0; d]);
    if residual.len() != d {
        return Err(Error::LengthMismatch { expected: residual.len(), got: d });
    }
    // q = g + e, rounded to storage precision before compression.
    let q64: Vec<f64> = gradient
        .as_slice()
        .iter()
        .zip(residual.iter())
        .map(|(g, e)| *g as f64 + e)
        .collect();
    let q = GradientVector::from_f64(&q64)?;
    let msg = compress(kind, &q, &rng)?;
    let certified_delta = certified_delta(kind, &q);
    *residual = residual_after(&q, &msg)?;
    Ok(PushOutcome { msg, certified_delta })
}

/// `q - decompress(msg)` in f64, taking the O(k) zero-fill shortcut when
/// the message supports it.
fn residual_after(q: &GradientVector, msg: &CompressedMessage) -> Result<Vec<f64>> {
    match fused_error_update(q, msg) {
        Ok(e) => Ok(e.as_slice().iter().map(|v| *v as f64).collect()),
        Err(Error::UnsupportedKind { .. }) => {
            let decoded = decompress(msg)?;
            Ok(q.as_slice()
                .iter()
                .zip(decoded.as_slice())
                .map(|(a, b)| *a as f64 - *b as f64)
                .collect())
        }
        Err(e) => Err(e),
    }
}

fn certified_delta(kind: CompressorKind, x: &GradientVector) -> Option<f64> {
    if kind.is_contractive() && x.l2_norm() > 0.0 {
        delta_lower_bound(kind, x).ok()
    } else {
        None
    }
}

#[derive(Debug)]
struct PendingTensor {
    msgs: Vec<Option<CompressedMessage>>,
    received: usize,
}

/// Per-shard server state: residual errors, in-flight aggregation
/// buffers, and round statistics.
#[derive(Debug)]
pub struct ServerShardState {
    shard_id: u32,
    residuals: HashMap<TensorId, Vec<f64>>,
    pending: HashMap<(u64, TensorId), PendingTensor>,
    round_min_delta: Option<f64>,
}

impl ServerShardState {
    pub fn new(shard_id: u32) -> Self {
        Self {
            shard_id,
            residuals: HashMap::new(),
            pending: HashMap::new(),
            round_min_delta: None,
        }
    }

    pub fn shard_id(&self) -> u32 {
        self.shard_id
    }

    pub fn residual_norm(&self, tensor: TensorId) -> f64 {
        self.residuals
            .get(&tensor)
            .map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }

    pub fn max_residual_norm(&self) -> f64 {
        self.residuals
            .keys()
            .map(|t| self.residual_norm(*t))
            .fold(0.0, f64::max)
    }

    /// Smallest certified delta among this shard's pull compressions
    /// since the last reset.
    pub fn round_min_delta(&self) -> Option<f64> {
        self.round_min_delta
    }

    pub fn reset_round_stats(&mut self) {
        self.round_min_delta = None;
    }

    /// Feed one worker message. Returns the broadcast reply once all
    /// `n` workers have pushed this tensor for this round.
    pub fn ingest(
        &mut self,
        cfg: &AggregationConfig,
        round: u64,
        tensor: TensorId,
        worker_id: u32,
        msg: CompressedMessage,
        ctx: &RoundContext,
    ) -> Result<Option<CompressedMessage>> {
        let n = cfg.n_workers as usize;
        if worker_id as usize >= n {
            return Err(Error::WorkerCountMismatch { expected: n, got: worker_id as usize + 1 });
        }
        let entry = self
            .pending
            .entry((round, tensor))
            .or_insert_with(|| PendingTensor { msgs: vec![None; n], received: 0 });
        if entry.msgs[worker_id as usize].is_some() {
            return Err(Error::Config(format!(
                "duplicate push from worker {worker_id} for tensor {tensor} round {round}"
            )));
        }
        entry.msgs[worker_id as usize] = Some(msg);
        entry.received += 1;
        if entry.received < n {
            return Ok(None);
        }
        let pending = self.pending.remove(&(round, tensor)).expect("entry present");
        let reply = self.finalize(cfg, tensor, pending, ctx)?;
        Ok(Some(reply))
    }

    /// All n messages are in: decode in worker order, average with 64-bit
    /// accumulation, apply the residual, re-compress for the pull path.
    fn finalize(
        &mut self,
        cfg: &AggregationConfig,
        tensor: TensorId,
        pending: PendingTensor,
        ctx: &RoundContext,
    ) -> Result<CompressedMessage> {
        let n = pending.msgs.len();
        let mut acc: Vec<f64> = Vec::new();
        for slot in &pending.msgs {
            let msg = slot.as_ref().expect("finalize requires all messages");
            let decoded = decompress(msg)?;
            if acc.is_empty() {
                acc = vec![0.0; decoded.len()];
            } else if acc.len() != decoded.len() {
                return Err(Error::LengthMismatch { expected: acc.len(), got: decoded.len() });
            }
            for (a, v) in acc.iter_mut().zip(decoded.as_slice()) {
                *a += *v as f64;
            }
        }
        let d = acc.len();
        let kind = cfg.effective_kind(d);
        let use_ef = cfg.mode == AggregationMode::CompressedEf && kind != CompressorKind::None;
        let inv = 1.0 / n as f64;
        let rng = ctx.pull_rng(self.shard_id, tensor);
        if !use_ef {
            let mean = GradientVector::new(acc.iter().map(|a| (a * inv) as f32).collect())?;
            let reply = compress(kind, &mean, &rng)?;
            self.observe_delta(certified_delta(kind, &mean));
            return Ok(reply);
        }
        let residual = self
            .residuals
            .entry(tensor)
            .or_insert_with(|| vec![0.0; d]);
        if residual.len() != d {
            return Err(Error::LengthMismatch { expected: residual.len(), got: d });
        }
        let delta64: Vec<f64> = acc
            .iter()
            .zip(residual.iter())
            .map(|(a, e)| a * inv + e)
            .collect();
        let delta = GradientVector::from_f64(&delta64)?;
        let reply = compress(kind, &delta, &rng)?;
        *residual = residual_after(&delta, &reply)?;
        self.observe_delta(certified_delta(kind, &delta));
        Ok(reply)
    }

    fn observe_delta(&mut self, delta: Option<f64>) {
        if let Some(d) = delta {
            self.round_min_delta = Some(self.round_min_delta.map_or(d, |m| m.min(d)));
        }
    }
}

/// Full-precision aggregation: the mean of the workers' gradients with
/// 64-bit accumulation in worker order.
pub fn push_pull(gradients: &[GradientVector]) -> Result<GradientVector> {
    mean_of(gradients)
}

pub(crate) fn check_round_inputs(
    cfg: &AggregationConfig,
    gradients: &[GradientVector],
) -> Result<()> {
    if gradients.len() != cfg.n_workers as usize {
        return Err(Error::WorkerCountMismatch {
            expected: cfg.n_workers as usize,
            got: gradients.len(),
        });
    }
    let d = gradients[0].len();
    for g in gradients {
        if g.len() != d {
            return Err(Error::LengthMismatch { expected: d, got: g.len() });
        }
    }
    Ok(())
}

fn aggregate_one(
    cfg: &AggregationConfig,
    workers: &mut [WorkerState],
    shard: &mut ServerShardState,
    tensor: TensorId,
    gradients: &[GradientVector],
    ctx: &RoundContext,
) -> Result<GradientVector> {
    check_round_inputs(cfg, gradients)?;
    let mut reply = None;
    for (worker, gradient) in workers.iter_mut().zip(gradients) {
        let outcome = worker_prepare_push(cfg, worker, tensor, gradient, ctx)?;
        shard.observe_delta(outcome.certified_delta);
        if let Some(p) =
            shard.ingest(cfg, ctx.iteration, tensor, worker.worker_id, outcome.msg, ctx)?
        {
            reply = Some(p);
        }
    }
    let reply = reply.expect("all workers pushed");
    decompress(&reply)
}

/// Two-way compressed aggregation without error feedback: workers push
/// `C(g_i)`, the shard averages the decoded messages and re-compresses
/// the mean for the pull path. No residual state is touched.
pub fn compress_push_pull(
    cfg: &AggregationConfig,
    workers: &mut [WorkerState],
    shard: &mut ServerShardState,
    tensor: TensorId,
    gradients: &[GradientVector],
    ctx: &RoundContext,
) -> Result<GradientVector> {
    if cfg.mode != AggregationMode::Compressed {
        return Err(Error::Config("compress_push_pull requires the compressed mode".into()));
    }
    cfg.validate()?;
    aggregate_one(cfg, workers, shard, tensor, gradients, ctx)
}

/// Two-way compressed aggregation with error feedback: workers push
/// `C(g_i + e_i)` and keep `e_i' = q_i - decompress(C(q_i))`; the shard
/// averages, adds its own residual, re-compresses, and keeps
/// `e_server' = Delta - decompress(p)`.
pub fn compress_ef_push_pull(
    cfg: &AggregationConfig,
    workers: &mut [WorkerState],
    shard: &mut ServerShardState,
    tensor: TensorId,
    gradients: &[GradientVector],
    ctx: &RoundContext,
) -> Result<GradientVector> {
    if cfg.mode != AggregationMode::CompressedEf {
        return Err(Error::Config(
            "compress_ef_push_pull requires the compressed_ef mode".into(),
        ));
    }
    cfg.validate()?;
    aggregate_one(cfg, workers, shard, tensor, gradients, ctx)
}

/// Default shard assignment: a pure function of the tensor id.
pub fn assign_shard(tensor_id: TensorId, shard_count: u32) -> u32 {
    tensor_id % shard_count
}

/// A tensor registered with the fabric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TensorSpec {
    pub id: TensorId,
    pub dim: usize,
}

/// Compute the tensor -> shard map for a policy. Size balancing packs
/// encoded byte counts grech largest-first onto the least-loaded shard, so
/// shard loads differ by at most one tensor's bytes.
pub fn plan_shards(
    cfg: &AggregationConfig,
    specs: &[TensorSpec],
) -> Result<HashMap<TensorId, u32>> {
    let mut map = HashMap::with_capacity(specs.len());
    match cfg.shard_policy {
        ShardPolicy::Modulo => {
            for spec in specs {
                map.insert(spec.id, assign_shard(spec.id, cfg.shard_count));
            }
        }
        ShardPolicy::SizeBalanced => {
            let mut sized: Vec<(u64, TensorId)> = specs
                .iter()
                .map(|s| {
                    let kind = cfg.effective_kind(s.dim);
                    let bytes = kind.payload_size(s.dim).unwrap_or(4 * s.dim) as u64;
                    Ok((bytes, s.id))
                })
                .collect::<Result<_>>()?;
            // Largest first; ties by tensor id for determinism.
            sized.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut loads = vec![0u64; cfg.shard_count as usize];
            for (bytes, id) in sized {
                let shard = loads
                    .iter()
                    .enumerate()
                    .min_by_key(|(i, l)| (**l, *i))
                    .map(|(i, _)| i as u32)
                    .unwrap();
                loads[shard as usize] += bytes;
                map.insert(id, shard);
            }
        }
    }
    Ok(map)
}

/// All worker gradients for one synchronous round, keyed by tensor.
#[derive(Debug, Clone, Default)]
pub struct RoundInput {
    pub gradients: BTreeMap<TensorId, Vec<GradientVector>>,
}

/// What a round produced, with the byte counters and residual statistics
/// the monitors consume.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub outputs: BTreeMap<TensorId, GradientVector>,
    /// Wire-frame bytes one worker pushed this round (identical across
    /// workers; transport length prefixes excluded).
    pub push_bytes_per_worker: u64,
    /// Wire-frame bytes one worker received on the pull path.
    pub pull_bytes_per_worker: u64,
    pub max_worker_residual: f64,
    pub max_server_residual: f64,
    /// Largest |g_j| over all worker inputs this round.
    pub max_abs_gradient: f64,
    /// Smallest certified contraction factor among this round's
    /// compressions (push and pull sides), when the kind certifies one.
    pub min_certified_delta: Option<f64>,
}

/// A synchronous aggregation fabric: something that can run one
/// bulk-synchronous round. Implemented by the in-process and TCP
/// clusters, which produce bit-identical reports under equal seeds.
pub trait RoundFabric {
    fn run_round(&mut self, input: &RoundInput, ctx: &RoundContext) -> Result<RoundReport>;
    fn config(&self) -> &AggregationConfig;
}

impl RoundFabric for InProcessCluster {
    fn run_round(&mut self, input: &RoundInput, ctx: &RoundContext) -> Result<RoundReport> {
        InProcessCluster::run_round(self, input, ctx)
    }

    fn config(&self) -> &AggregationConfig {
        InProcessCluster::config(self)
    }
}

impl RoundFabric for tcp::TcpCluster {
    fn run_round(&mut self, input: &RoundInput, ctx: &RoundContext) -> Result<RoundReport> {
        tcp::TcpCluster::run_round(self, input, ctx)
    }

    fn config(&self) -> &AggregationConfig {
        tcp::TcpCluster::config(self)
    }
}

/// In-process fabric: workers and shards live in this struct; frames move
/// by function call. The TCP fabric in [`tcp`] reuses the same state
/// machines over sockets.
#[derive(Debug)]
pub struct InProcessCluster {
    cfg: AggregationConfig,
    assignment: HashMap<TensorId, u32>,
    workers: Vec<WorkerState>,
    shards: Vec<ServerShardState>,
}

impl InProcessCluster {
    pub fn new(cfg: AggregationConfig, specs: &[TensorSpec]) -> Result<Self> {
        cfg.validate()?;
        let assignment = plan_shards(&cfg, specs)?;
        Ok(Self {
            cfg,
            assignment,
            workers: (0..cfg.n_workers).map(WorkerState::new).collect(),
            shards: (0..cfg.shard_count).map(ServerShardState::new).collect(),
        })
    }

    pub fn config(&self) -> &AggregationConfig {
        &self.cfg
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn shards(&self) -> &[ServerShardState] {
        &self.shards
    }

    pub fn shard_of(&self, tensor: TensorId) -> Option<u32> {
        self.assignment.get(&tensor).copied()
    }

    /// One bulk-synchronous round over every tensor in the input.
    pub fn run_round(&mut self, input: &RoundInput, ctx: &RoundContext) -> Result<RoundReport> {
        for shard in &mut self.shards {
            shard.reset_round_stats();
        }
        let mut outputs = BTreeMap::new();
        let mut push_bytes = 0u64;
        let mut pull_bytes = 0u64;
        let mut max_abs_gradient = 0.0f64;
        let mut min_delta: Option<f64> = None;

        for (tensor, gradients) in &input.gradients {
            let shard_id = *self
                .assignment
                .get(tensor)
                .ok_or_else(|| Error::Config(format!("tensor {tensor} not registered")))?;
            check_round_inputs(&self.cfg, gradients)?;
            for g in gradients {
                max_abs_gradient = max_abs_gradient.max(g.linf_norm());
            }
            let shard = &mut self.shards[shard_id as usize];
            let mut reply = None;
            for (worker, gradient) in self.workers.iter_mut().zip(gradients) {
                let outcome =
                    worker_prepare_push(&self.cfg, worker, *tensor, gradient, ctx)?;
                if worker.worker_id == 0 {
                    push_bytes += (FRAME_HEADER_LEN + outcome.msg.payload.len()) as u64;
                }
                shard.observe_delta(outcome.certified_delta);
                if let Some(p) = shard.ingest(
                    &self.cfg,
                    ctx.iteration,
                    *tensor,
                    worker.worker_id,
                    outcome.msg,
                    ctx,
                )? {
                    reply = Some(p);
                }
            }
            let reply = reply.expect("round complete");
            pull_bytes += (FRAME_HEADER_LEN + reply.payload.len()) as u64;
            outputs.insert(*tensor, decompress(&reply)?);
        }
        for shard in &self.shards {
            if let Some(d) = shard.round_min_delta() {
                min_delta = Some(min_delta.map_or(d, |m| m.min(d)));
            }
        }
        Ok(RoundReport {
            outputs,
            push_bytes_per_worker: push_bytes,
            pull_bytes_per_worker: pull_bytes,
            max_worker_residual: self
                .workers
                .iter()
                .map(WorkerState::max_residual_norm)
                .fold(0.0, f64::max),
            max_server_residual: self
                .shards
                .iter()
                .map(ServerShardState::max_residual_norm)
                .fold(0.0, f64::max),
            max_abs_gradient,
            min_certified_delta: min_delta,
        })
    }
}

/// Intra-node stage: average `m` local device gradients after an
/// f32 -> f16 -> f32 round trip. With one device the conversion is
/// skipped entirely.
pub fn local_reduce(device_gradients: &[GradientVector]) -> Result<GradientVector> {
    match device_gradients {
        [] => Err(Error::WorkerCountMismatch { expected: 1, got: 0 }),
        [single] => Ok(single.clone()),
        many => {
            let rng = DeterministicRng::new(StreamKey::new(0));
            let converted: Vec<GradientVector> = many
                .iter()
                .map(|g| {
                    let msg = compress(CompressorKind::Fp16, g, &rng)?;
                    decompress(&msg)
                })
                .collect::<Result<_>>()?;
            mean_of(&converted)
        }
    }
}
