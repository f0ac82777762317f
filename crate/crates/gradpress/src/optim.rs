//! Layer-wise adaptive optimizers and their compressed-aggregation
//! driver.
//!
//! The adaptive step keeps bias-corrected moments in f64 using the
//! algebraically equivalent recursion
//! `mhat_t = b1 (1-b1^{t-1})/(1-b1^t) mhat_{t-1} + (1-b1)/(1-b1^t) p_t`,
//! whose t = 1 coefficients are exactly 0 and 1, so the first-step
//! identity `mhat_1 = p_1` holds bit-exactly.

use crate::error::{Error, Result};
use crate::partition::BlockPartition;
use crate::protocol::{RoundContext, RoundFabric, RoundInput, RoundReport, TensorId};
use crate::vector::GradientVector;
use std::collections::BTreeMap;

/// Clamp-of-identity scaling function with the bounds of the trust-ratio
/// assumption: `phi(z) = min(max(z, alpha_l), alpha_u)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScalingFn {
    pub alpha_l: f64,
    pub alpha_u: f64,
}

impl Default for ScalingFn {
    fn default() -> Self {
        Self { alpha_l: 0.01, alpha_u: 10.0 }
    }
}

impl ScalingFn {
    pub fn apply(&self, z: f64) -> f64 {
        z.clamp(self.alpha_l, self.alpha_u)
    }
}

/// Learning-rate schedule indexed by the 1-based step counter.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LrSchedule {
    Constant(f64),
    /// Explicit per-step rates; steps past the end reuse the last entry.
    Steps(Vec<f64>),
}

impl LrSchedule {
    pub fn at(&self, t: u64) -> f64 {
        match self {
            LrSchedule::Constant(eta) => *eta,
            LrSchedule::Steps(etas) => {
                let idx = ((t - 1) as usize).min(etas.len().saturating_sub(1));
                etas[idx]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            LrSchedule::Constant(eta) => *eta > 0.0 && eta.is_finite(),
            LrSchedule::Steps(etas) => {
                !etas.is_empty() && etas.iter().all(|e| *e > 0.0 && e.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("learning rates must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LansConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub scaling: ScalingFn,
    pub partition: BlockPartition,
}

impl LansConfig {
    pub fn new(d: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant(0.1),
            scaling: ScalingFn::default(),
            partition: BlockPartition::single(d).unwrap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if !(self.scaling.alpha_l > 0.0 && self.scaling.alpha_l <= self.scaling.alpha_u) {
            return Err(Error::Config("scaling bounds need 0 < alpha_l <= alpha_u".into()));
        }
        self.schedule.validate()
    }
}

/// Moment state. `mhat`/`vhat` are the bias-corrected moments; the raw
/// moments are recoverable as `m_t = mhat (1 - b1^t)`.
#[derive(Debug, Clone)]
pub struct LansState {
    mhat: Vec<f64>,
    vhat: Vec<f64>,
    steps: u64,
}

impl LansState {
    pub fn new(d: usize) -> Self {
        Self { mhat: vec![0.0; d], vhat: vec![0.0; d], steps: 0 }
    }

    /// Completed step count.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Bias-corrected first moment.
    pub fn mhat(&self) -> &[f64] {
        &self.mhat
    }

    /// Bias-corrected second moment (coordinate-wise nonnegative).
    pub fn vhat(&self) -> &[f64] {
        &self.vhat
    }

    /// Raw first moment in storage precision.
    pub fn first_moment(&self, beta1: f64) -> GradientVector {
        let bc = 1.0 - beta1.powi(self.steps as i32);
        GradientVector::new(self.mhat.iter().map(|m| (m * bc) as f32).collect())
            .unwrap_or_else(|_| GradientVector::zeros(self.mhat.len().max(1)).unwrap())
    }

    /// Raw second moment in storage precision.
    pub fn second_moment(&self, beta2: f64) -> GradientVector {
        let bc = 1.0 - beta2.powi(self.steps as i32);
        GradientVector::new(self.vhat.iter().map(|v| (v * bc) as f32).collect())
            .unwrap_or_else(|_| GradientVector::zeros(self.vhat.len().max(1)).unwrap())
    }
}

/// One layer-wise adaptive step on the aggregated gradient. Moments
/// update globally; the two-term normalized update is computed per block
/// and scaled by the clamped block norm. Returns the new parameters.
pub fn lans_step(
    cfg: &LansConfig,
    state: &mut LansState,
    x: &GradientVector,
    aggregated: &GradientVector,
) -> Result<GradientVector> {
    cfg.validate()?;
    let d = x.len();
    if aggregated.len() != d {
        return Err(Error::LengthMismatch { expected: d, got: aggregated.len() });
    }
    if state.mhat.len() != d {
        return Err(Error::LengthMismatch { expected: d, got: state.mhat.len() });
    }
    if cfg.partition.len() != d {
        return Err(Error::LengthMismatch { expected: d, got: cfg.partition.len() });
    }
    let t = state.steps + 1;
    let eta = cfg.schedule.at(t);

    // Bias-corrected moment recursions; at t = 1 the carry coefficient is
    // exactly 0 and the input coefficient exactly 1.
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc1_prev = 1.0 - cfg.beta1.powi(t as i32 - 1);
    let carry_m = cfg.beta1 * bc1_prev / bc1;
    let gain_m = (1.0 - cfg.beta1) / bc1;
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let bc2_prev = 1.0 - cfg.beta2.powi(t as i32 - 1);
    let carry_v = cfg.beta2 * bc2_prev / bc2;
    let gain_v = (1.0 - cfg.beta2) / bc2;
    for j in 0..d {
        let p = aggregated[j] as f64;
        state.mhat[j] = carry_m * state.mhat[j] + gain_m * p;
        state.vhat[j] = carry_v * state.vhat[j] + gain_v * p * p;
    }

    let mut out = vec![0f32; d];
    for b in 0..cfg.partition.block_count() {
        let range = cfg.partition.block_range(b);
        let lambda = cfg.weight_decay;
        let mut ur = Vec::with_capacity(range.len());
        let mut uc = Vec::with_capacity(range.len());
        let mut x_norm_sq = 0.0f64;
        for j in range.clone() {
            let xj = x[j] as f64;
            let denom = state.vhat[j].sqrt() + cfg.epsilon;
            ur.push(state.mhat[j] / denom + lambda * xj);
            uc.push(aggregated[j] as f64 / denom + lambda * xj);
            x_norm_sq += xj * xj;
        }
        let ur_norm = ur.iter().map(|v| v * v).sum::<f64>().sqrt();
        let uc_norm = uc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let phi = cfg.scaling.apply(x_norm_sq.sqrt());
        // Zero-norm terms contribute the zero vector.
        let wr = if ur_norm > 0.0 { cfg.beta1 / ur_norm } else { 0.0 };
        let wc = if uc_norm > 0.0 { (1.0 - cfg.beta1) / uc_norm } else { 0.0 };
        for (offset, j) in range.enumerate() {
            let step = phi * (wr * ur[offset] + wc * uc[offset]);
            if !step.is_finite() {
                return Err(Error::NonFiniteUpdate("block update"));
            }
            out[j] = ((x[j] as f64) - eta * step) as f32;
        }
    }
    state.steps = t;
    GradientVector::new(out).map_err(|_| Error::NonFiniteUpdate("parameters"))
}

/// Nesterov-momentum baseline state.
#[derive(Debug, Clone)]
pub struct NagState {
    velocity: Vec<f64>,
}

impl NagState {
    pub fn new(d: usize) -> Self {
        Self { velocity: vec![0.0; d] }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NagConfig {
    pub momentum: f64,
    pub lr: f64,
}

impl NagConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Nesterov accelerated gradient step on the aggregated gradient:
/// `v <- mu v + g; x <- x - eta (g + mu v)`.
pub fn nag_ef_step(
    cfg: &NagConfig,
    state: &mut NagState,
    x: &GradientVector,
    aggregated: &GradientVector,
) -> Result<GradientVector> {
    cfg.validate()?;
    let d = x.len();
    if aggregated.len() != d || state.velocity.len() != d {
        return Err(Error::LengthMismatch { expected: d, got: aggregated.len() });
    }
    let mut out = vec![0f32; d];
    for j in 0..d {
        let g = aggregated[j] as f64;
        state.velocity[j] = cfg.momentum * state.velocity[j] + g;
        out[j] = ((x[j] as f64) - cfg.lr * (g + cfg.momentum * state.velocity[j])) as f32;
    }
    GradientVector::new(out).map_err(|_| Error::NonFiniteUpdate("parameters"))
}

/// One simulated worker's optimizer replica.
#[derive(Debug, Clone)]
pub struct ClanReplica {
    pub params: GradientVector,
    pub lans: LansState,
}

impl ClanReplica {
    pub fn new(params: GradientVector) -> Self {
        let d = params.len();
        Self { params, lans: LansState::new(d) }
    }
}

/// What one full optimizer iteration produced.
#[derive(Debug)]
pub struct ClanStepReport {
    /// The shared aggregated gradient all replicas stepped on.
    pub aggregated: GradientVector,
    pub round: RoundReport,
}

/// Split a flat vector into protocol tensors, one per partition block.
pub fn split_blocks(partition: &BlockPartition, flat: &GradientVector) -> Vec<GradientVector> {
    partition
        .ranges()
        .map(|r| GradientVector::new(flat.as_slice()[r].to_vec()).expect("non-empty block"))
        .collect()
}

/// Reassemble block tensors back into a flat vector.
pub fn join_blocks(
    partition: &BlockPartition,
    blocks: &BTreeMap<TensorId, GradientVector>,
) -> Result<GradientVector> {
    let mut out = vec![0f32; partition.len()];
    for (b, range) in partition.ranges().enumerate() {
        let block = blocks
            .get(&(b as TensorId))
            .ok_or_else(|| Error::Config(format!("missing block tensor {b}")))?;
        if block.len() != range.len() {
            return Err(Error::LengthMismatch { expected: range.len(), got: block.len() });
        }
        out[range].copy_from_slice(block.as_slice());
    }
    GradientVector::new(out)
}

/// One CLAN iteration: aggregate the workers' gradients through the
/// fabric (each partition block travels as its own tensor), then apply
/// the same adaptive step on every replica. All replicas end the
/// iteration with bit-identical parameters.
pub fn clan_iteration<F: RoundFabric>(
    cfg: &LansConfig,
    replicas: &mut [ClanReplica],
    fabric: &mut F,
    worker_gradients: &[GradientVector],
    ctx: &RoundContext,
) -> Result<ClanStepReport> {
    if replicas.len() != worker_gradients.len() {
        return Err(Error::WorkerCountMismatch {
            expected: replicas.len(),
            got: worker_gradients.len(),
        });
    }
    let mut input = RoundInput::default();
    for (b, _) in cfg.partition.ranges().enumerate() {
        input
            .gradients
            .insert(b as TensorId, Vec::with_capacity(worker_gradients.len()));
    }
    for g in worker_gradients {
        if g.len() != cfg.partition.len() {
            return Err(Error::LengthMismatch { expected: cfg.partition.len(), got: g.len() });
        }
        for (b, block) in split_blocks(&cfg.partition, g).into_iter().enumerate() {
            input.gradients.get_mut(&(b as TensorId)).unwrap().push(block);
        }
    }
    let round = fabric.run_round(&input, ctx)?;
    let aggregated = join_blocks(&cfg.partition, &round.outputs)?;
    for replica in replicas.iter_mut() {
        replica.params = lans_step(cfg, &mut replica.lans, &replica.params, &aggregated)?;
    }
    if let Some((first, rest)) = replicas.split_first() {
        for (i, r) in rest.iter().enumerate() {
            if r.params.as_slice() != first.params.as_slice() {
                return Err(Error::Config(format!("replica {} diverged from replica 0", i + 1)));
            }
        }
    }
    Ok(ClanStepReport { aggregated, round })
}
