//! Closed-form convergence-bound constants and empirical monitors.
//!
//! The calculators evaluate the error bound of the adaptive method under
//! a general gradient estimator, specialized for full precision, unbiased
//! compressors, and contractive compressors with error feedback. The
//! monitors check simulator trajectories against the residual and
//! first-moment inequalities those bounds rest on.

use crate::compress::CompressorKind;
use crate::error::{Error, Result};

/// Everything the bound calculators need about a run configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundInputs {
    /// Per-coordinate smoothness constants L_j.
    pub lipschitz: Vec<f64>,
    /// Per-coordinate gradient-noise scales sigma_j.
    pub sigma: Vec<f64>,
    /// Coordinate-wise gradient bound G.
    pub grad_bound: f64,
    pub epsilon: f64,
    /// Per-worker batch size s.
    pub batch_size: u64,
    /// Worker count n.
    pub workers: u64,
    /// Horizon T.
    pub horizon: u64,
    /// Fixed learning rate eta.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha_l: f64,
    pub alpha_u: f64,
    pub dim: usize,
    /// Initial function gap F(x_1) - F(x_*).
    pub function_gap: f64,
    /// Divergent bounds are capped at this sentinel and flagged.
    pub sentinel_cap: f64,
}

impl BoundInputs {
    pub fn new(dim: usize) -> Self {
        Self {
            lipschitz: vec![1.0; dim],
            sigma: vec![0.0; dim],
            grad_bound: 1.0,
            epsilon: 1e-6,
            batch_size: 1,
            workers: 1,
            horizon: 1,
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            alpha_l: 0.01,
            alpha_u: 10.0,
            dim,
            function_gap: 0.0,
            sentinel_cap: 1e18,
        }
    }

    pub fn l1_lipschitz(&self) -> f64 {
        self.lipschitz.iter().sum()
    }

    pub fn l1_sigma(&self) -> f64 {
        self.sigma.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lipschitz.len() != self.dim || self.sigma.len() != self.dim {
            return Err(Error::Config("lipschitz/sigma length must equal dim".into()));
        }
        if self.lipschitz.iter().chain(&self.sigma).any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Config("lipschitz/sigma entries must be nonnegative".into()));
        }
        if self.grad_bound < 0.0 || self.function_gap < 0.0 {
            return Err(Error::Config("G and the function gap must be nonnegative".into()));
        }
        if self.horizon == 0 || self.workers == 0 || self.batch_size == 0 {
            return Err(Error::Config("T, n, s must be at least 1".into()));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if !(self.alpha_l > 0.0 && self.alpha_l <= self.alpha_u) {
            return Err(Error::Config("alphas need 0 < alpha_l <= alpha_u".into()));
        }
        Ok(())
    }
}

/// The evaluated error bound with its per-term breakdown; `rhs` is the
/// exact sum of the four terms.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundReport {
    pub v1_prime: f64,
    pub v2: f64,
    pub v3: f64,
    pub initial_gap_term: f64,
    pub bias_term: f64,
    pub smoothness_term: f64,
    pub noise_term: f64,
    pub rhs: f64,
}

/// Evaluate the general error bound for given estimator constants.
pub fn theorem1_rhs(inputs: &BoundInputs, v1_prime: f64, v2: f64, v3: f64) -> Result<BoundReport> {
    inputs.validate()?;
    if v1_prime < 0.0 || v2 < 0.0 || v3 < 0.0 {
        return Err(Error::Config("estimator constants must be nonnegative".into()));
    }
    if inputs.beta1 >= 1.0 - 1e-12 || inputs.beta2 >= 1.0 - 1e-12 {
        return Err(Error::DegenerateParams("beta within 1e-12 of 1"));
    }
    let d = inputs.dim as f64;
    let sqrt_d = d.sqrt();
    let b1 = inputs.beta1;
    let one_minus_b1 = 1.0 - b1;
    let sqrt_one_minus_b2 = (1.0 - inputs.beta2).sqrt();
    let t = inputs.horizon as f64;

    let initial_gap_term = sqrt_d * v1_prime * inputs.function_gap
        / (t * inputs.lr * inputs.alpha_l * one_minus_b1 * sqrt_one_minus_b2);
    let bias_term = sqrt_d * inputs.grad_bound * v3;
    let smoothness_term = inputs.lr
        * sqrt_d
        * v1_prime
        * inputs.alpha_u
        * inputs.alpha_u
        * (1.0 - b1 + 2.0 * b1 * b1)
        * inputs.l1_lipschitz()
        / (2.0 * sqrt_one_minus_b2 * one_minus_b1 * one_minus_b1 * inputs.alpha_l);
    let noise_term = sqrt_d
        * v1_prime
        * inputs.alpha_u
        * (one_minus_b1 * one_minus_b1 + b1)
        * v2
        / (sqrt_one_minus_b2 * one_minus_b1 * one_minus_b1 * inputs.alpha_l);
    Ok(BoundReport {
        v1_prime,
        v2,
        v3,
        initial_gap_term,
        bias_term,
        smoothness_term,
        noise_term,
        rhs: initial_gap_term + bias_term + smoothness_term + noise_term,
    })
}

/// Estimator constants for one aggregation variant. `v1` excludes the
/// epsilon shift: the bound consumes `v1 + epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorollaryConstants {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    /// Whether the corollary's rate condition on the compressor parameter
    /// holds at this horizon (None for full precision).
    pub rate_condition: Option<bool>,
    /// True when a divergent constant was clipped to the sentinel cap.
    pub capped: bool,
}

impl CorollaryConstants {
    pub fn v1_prime(&self, epsilon: f64) -> f64 {
        self.v1 + epsilon
    }
}

/// Full-precision aggregation: `V1 = G`, `V2 = |sigma|_1 / sqrt(ns)`,
/// `V3 = 0`.
pub fn corollary_full_precision(inputs: &BoundInputs) -> Result<CorollaryConstants> {
    inputs.validate()?;
    let ns = (inputs.workers * inputs.batch_size) as f64;
    Ok(CorollaryConstants {
        v1: inputs.grad_bound,
        v2: inputs.l1_sigma() / ns.sqrt(),
        v3: 0.0,
        rate_condition: None,
        capped: false,
    })
}

/// Which omega convention the unbiased-compressor constants use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum OmegaConvention {
    /// Deviation form `E|C(x) - x|^2 <= omega |x|^2` with excess factor
    /// `sqrt(4 omega^2 + 6 omega)` and rate condition `omega <= 1/T`.
    #[default]
    Deviation,
    /// Multiplicative form `E|C(x)|^2 <= omega |x|^2` (omega >= 1) with
    /// excess factor `sqrt(omega - 1 + omega (omega - 1)/n)` and rate
    /// condition `omega <= 1 + 1/T`. Never mixed with the deviation form.
    Multiplicative,
}

/// Unbiased two-way compression: `V3 = 0` and the excess over full
/// precision enters through `d G` times the convention's factor.
pub fn corollary_unbiased(
    inputs: &BoundInputs,
    omega: f64,
    convention: OmegaConvention,
) -> Result<CorollaryConstants> {
    inputs.validate()?;
    let t = inputs.horizon as f64;
    let (factor, rate_ok) = match convention {
        OmegaConvention::Deviation => {
            if omega < 0.0 {
                return Err(Error::NegativeOmega(omega));
            }
            ((4.0 * omega * omega + 6.0 * omega).sqrt(), omega <= 1.0 / t)
        }
        OmegaConvention::Multiplicative => {
            if omega < 1.0 {
                return Err(Error::NegativeOmega(omega));
            }
            let n = inputs.workers as f64;
            ((omega - 1.0 + omega * (omega - 1.0) / n).sqrt(), omega <= 1.0 + 1.0 / t)
        }
    };
    let d = inputs.dim as f64;
    let g = inputs.grad_bound;
    let ns = (inputs.workers * inputs.batch_size) as f64;
    Ok(CorollaryConstants {
        v1: (1.0 + d * factor) * g,
        v2: inputs.l1_sigma() / ns.sqrt() + d * g * factor,
        v3: 0.0,
        rate_condition: Some(rate_ok),
        capped: false,
    })
}

/// Contractive compression with error feedback: the bias `V3` comes from
/// the residual-accumulator lemma and feeds both `V1` and `V2`.
pub fn corollary_biased(inputs: &BoundInputs, delta: f64) -> Result<CorollaryConstants> {
    inputs.validate()?;
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::DeltaOutOfRange(delta));
    }
    let d = inputs.dim as f64;
    let g = inputs.grad_bound;
    let sqrt_d = d.sqrt();
    let root = (1.0 - delta).sqrt();
    let (v3_raw, capped) = if delta == 1.0 {
        (0.0, false)
    } else {
        let lead = 2.0 * root / (1.0 - root);
        let inner = sqrt_d + 2.0 * (1.0 + (d * (1.0 - delta)).sqrt() / (1.0 - root));
        let v = lead * inner * g;
        if v.is_finite() && v <= inputs.sentinel_cap {
            (v, false)
        } else {
            (inputs.sentinel_cap, true)
        }
    };
    let ns = (inputs.workers * inputs.batch_size) as f64;
    let t = inputs.horizon as f64;
    let sqrt_t = t.sqrt();
    let rate_ok = if sqrt_t <= 1.0 {
        true // the condition degenerates at T = 1
    } else {
        delta >= 1.0 - 1.0 / ((sqrt_t - 1.0) * (sqrt_t - 1.0))
    };
    Ok(CorollaryConstants {
        v1: g + sqrt_d * v3_raw,
        v2: inputs.l1_sigma() / ns.sqrt() + sqrt_d * v3_raw,
        v3: v3_raw,
        rate_condition: Some(rate_ok),
        capped,
    })
}

/// Worst-case residual-accumulator norms along any error-feedback
/// trajectory with a delta-approximate compressor and coordinate bound G.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EfResidualBounds {
    /// Bound on any worker residual norm.
    pub worker: f64,
    /// Bound on the server residual norm.
    pub server: f64,
    pub combined: f64,
}

pub fn lemma_ef_residual_bound(
    delta: f64,
    dim: usize,
    grad_bound: f64,
) -> Result<EfResidualBounds> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::DeltaOutOfRange(delta));
    }
    if delta == 1.0 {
        return Ok(EfResidualBounds { worker: 0.0, server: 0.0, combined: 0.0 });
    }
    let root = (1.0 - delta).sqrt();
    let worker_per_g = (dim as f64 * (1.0 - delta)).sqrt() / (1.0 - root);
    let worker = worker_per_g * grad_bound;
    let server = 2.0 * root / (1.0 - root) * (1.0 + worker_per_g) * grad_bound;
    Ok(EfResidualBounds { worker, server, combined: worker + server })
}

/// One recorded optimizer step for the first-moment gap monitor.
#[derive(Debug, Clone)]
pub struct MomentGapSample {
    /// Bias-corrected first moment after the step's moment update.
    pub mhat: Vec<f64>,
    /// The aggregated gradient estimate the step consumed.
    pub estimate: Vec<f64>,
    /// Exact gradient at the step's parameters.
    pub oracle_grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MonitorReport {
    pub checked: u64,
    pub violations: u64,
    /// Smallest bound-minus-gap margin seen (negative on violation).
    pub worst_margin: f64,
}

/// Check the per-coordinate first-moment inequality
/// `|mhat_t - grad_t|_j <= b1/(1-b1) L_j eta alpha_u + |p_t - grad_t|_j
///  + sum_tau b1^tau/(1 - b1^t) |p_{t-tau} - grad_{t-tau}|_j`
/// over a recorded trajectory. Expected violation count: zero.
pub fn lemma_moment_gap_monitor(
    trajectory: &[MomentGapSample],
    inputs: &BoundInputs,
) -> Result<MonitorReport> {
    inputs.validate()?;
    if trajectory.is_empty() {
        return Err(Error::Config("empty trajectory".into()));
    }
    let d = inputs.dim;
    for s in trajectory {
        if s.mhat.len() != d || s.estimate.len() != d || s.oracle_grad.len() != d {
            return Err(Error::LengthMismatch { expected: d, got: s.mhat.len() });
        }
    }
    let b1 = inputs.beta1;
    let lead = b1 / (1.0 - b1) * inputs.lr * inputs.alpha_u;
    let mut checked = 0u64;
    let mut violations = 0u64;
    let mut worst_margin = f64::INFINITY;
    for (idx, sample) in trajectory.iter().enumerate() {
        let t = idx + 1;
        let bc = 1.0 - b1.powi(t as i32);
        for j in 0..d {
            let gap = (sample.mhat[j] - sample.oracle_grad[j]).abs();
            let mut bound =
                lead * inputs.lipschitz[j] + (sample.estimate[j] - sample.oracle_grad[j]).abs();
            let mut b1_pow = b1;
            for tau in 1..t {
                let past = &trajectory[t - tau - 1];
                bound += b1_pow / bc * (past.estimate[j] - past.oracle_grad[j]).abs();
                b1_pow *= b1;
            }
            let margin = bound - gap + 1e-9 * (1.0 + bound.abs());
            checked += 1;
            if margin < 0.0 {
                violations += 1;
            }
            worst_margin = worst_margin.min(bound - gap);
        }
    }
    Ok(MonitorReport { checked, violations, worst_margin })
}

/// `(T_fp + T_bp) / (T_fp + max(T_bp, T_comm))`: the overlap-limited
/// ceiling on multi-node scaling.
pub fn ideal_scaling_efficiency(t_fp: f64, t_bp: f64, t_comm: f64) -> Result<f64> {
    if !(t_fp > 0.0) || !t_fp.is_finite() {
        return Err(Error::NonPositiveTime("t_fp"));
    }
    if !(t_bp > 0.0) || !t_bp.is_finite() {
        return Err(Error::NonPositiveTime("t_bp"));
    }
    if t_comm < 0.0 || !t_comm.is_finite() {
        return Err(Error::NonPositiveTime("t_comm"));
    }
    Ok((t_fp + t_bp) / (t_fp + t_bp.max(t_comm)))
}

/// Dense reference format for compression-rate arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Fp32,
    Fp16,
}

/// Ratio of the dense baseline bytes to the encoded payload bytes
/// (frame headers excluded), from the closed-form codec size formula.
pub fn compression_rate(kind: CompressorKind, d: usize, baseline: Baseline) -> Result<f64> {
    let baseline_bytes = match baseline {
        Baseline::Fp32 => 4 * d,
        Baseline::Fp16 => 2 * d,
    };
    let payload = kind.payload_size(d)?;
    Ok(baseline_bytes as f64 / payload as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{SparseBudget, ValuePrecision};

    fn inputs(dim: usize) -> BoundInputs {
        let mut i = BoundInputs::new(dim);
        i.horizon = 100;
        i.batch_size = 4;
        i.workers = 2;
        i
    }

    #[test]
    fn theorem_term_isolation() {
        let mut i = inputs(4);
        i.function_gap = 0.0;
        i.sigma = vec![0.0; 4];
        let r = theorem1_rhs(&i, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(r.initial_gap_term, 0.0);
        assert_eq!(r.bias_term, 0.0);
        assert_eq!(r.noise_term, 0.0);
        assert!(r.smoothness_term > 0.0);
        assert_eq!(r.rhs, r.smoothness_term);

        i.lipschitz = vec![0.0; 4];
        let r = theorem1_rhs(&i, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(r.rhs, 0.0);
    }

    #[test]
    fn doubling_horizon_halves_only_the_gap_term() {
        let mut i = inputs(4);
        i.function_gap = 2.0;
        i.sigma = vec![0.5; 4];
        let a = theorem1_rhs(&i, 1.5, 0.3, 0.2).unwrap();
        i.horizon *= 2;
        let b = theorem1_rhs(&i, 1.5, 0.3, 0.2).unwrap();
        assert!((b.initial_gap_term - a.initial_gap_term / 2.0).abs() < 1e-12);
        assert_eq!(b.bias_term, a.bias_term);
        assert_eq!(b.smoothness_term, a.smoothness_term);
        assert_eq!(b.noise_term, a.noise_term);
    }

    #[test]
    fn degenerate_betas_rejected() {
        let mut i = inputs(2);
        i.beta1 = 1.0 - 1e-13;
        assert!(matches!(theorem1_rhs(&i, 1.0, 0.0, 0.0), Err(Error::DegenerateParams(_))));
    }

    #[test]
    fn full_precision_constants() {
        let mut i = inputs(3);
        i.sigma = vec![0.0; 3];
        assert_eq!(corollary_full_precision(&i).unwrap().v2, 0.0);

        i.sigma = vec![1.0; 3];
        let base = corollary_full_precision(&i).unwrap();
        i.workers *= 2;
        i.batch_size *= 2;
        let quad = corollary_full_precision(&i).unwrap();
        assert!((quad.v2 - base.v2 / 2.0).abs() < 1e-12);

        i.grad_bound = 1.0;
        i.epsilon = 1e-6;
        let c = corollary_full_precision(&i).unwrap();
        assert_eq!(c.v1_prime(i.epsilon), 1.0 + 1e-6);
        assert_eq!(c.v3, 0.0);
    }

    #[test]
    fn unbiased_reduces_to_full_precision_at_zero_omega() {
        let mut i = inputs(5);
        i.sigma = vec![0.3; 5];
        let full = corollary_full_precision(&i).unwrap();
        let un = corollary_unbiased(&i, 0.0, OmegaConvention::Deviation).unwrap();
        assert_eq!(un.v1, full.v1);
        assert_eq!(un.v2, full.v2);
        assert_eq!(un.v3, full.v3);
    }

    #[test]
    fn unbiased_excess_solves_the_quadratic() {
        // 4 w^2 + 6 w = 1 at w = (sqrt(13) - 3)/4: the additive V2 excess
        // is exactly d G.
        let mut i = inputs(2);
        i.grad_bound = 1.0;
        i.sigma = vec![0.0; 2];
        let omega = (13.0f64.sqrt() - 3.0) / 4.0;
        let c = corollary_unbiased(&i, omega, OmegaConvention::Deviation).unwrap();
        assert!((c.v2 - 2.0).abs() < 1e-12, "{}", c.v2);
        assert!((c.v1 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn unbiased_rate_condition_thresholds() {
        let mut i = inputs(2);
        i.horizon = 100;
        let ok = corollary_unbiased(&i, 0.01, OmegaConvention::Deviation).unwrap();
        assert_eq!(ok.rate_condition, Some(true));
        let no = corollary_unbiased(&i, 0.02, OmegaConvention::Deviation).unwrap();
        assert_eq!(no.rate_condition, Some(false));
        assert!(matches!(
            corollary_unbiased(&i, -0.1, OmegaConvention::Deviation),
            Err(Error::NegativeOmega(_))
        ));
        // The multiplicative convention needs omega >= 1.
        assert!(matches!(
            corollary_unbiased(&i, 0.5, OmegaConvention::Multiplicative),
            Err(Error::NegativeOmega(_))
        ));
        let m = corollary_unbiased(&i, 1.005, OmegaConvention::Multiplicative).unwrap();
        assert_eq!(m.rate_condition, Some(true));
    }

    #[test]
    fn biased_constants_hand_evaluation() {
        // d=1, G=1, delta=3/4: V3 = 2 * [1 + 2 * (1 + 1)] = 10.
        let mut i = inputs(1);
        i.grad_bound = 1.0;
        i.sigma = vec![0.0];
        let c = corollary_biased(&i, 0.75).unwrap();
        assert!((c.v3 - 10.0).abs() < 1e-12, "{}", c.v3);
        assert!((c.v1 - 11.0).abs() < 1e-12);
        assert!((c.v2 - 10.0).abs() < 1e-12);
    }

    #[test]
    fn biased_lossless_matches_full_precision() {
        let mut i = inputs(4);
        i.sigma = vec![0.2; 4];
        let full = corollary_full_precision(&i).unwrap();
        let b = corollary_biased(&i, 1.0).unwrap();
        assert_eq!(b.v3, 0.0);
        assert_eq!(b.v1, full.v1);
        assert_eq!(b.v2, full.v2);
        assert!(!b.capped);
    }

    #[test]
    fn biased_divergence_is_capped_and_flagged() {
        let mut i = inputs(4);
        i.sentinel_cap = 1e6;
        let c = corollary_biased(&i, 1e-18).unwrap();
        assert!(c.capped);
        assert_eq!(c.v3, 1e6);
        assert!(matches!(corollary_biased(&i, 0.0), Err(Error::DeltaOutOfRange(_))));
        assert!(matches!(corollary_biased(&i, 1.5), Err(Error::DeltaOutOfRange(_))));
    }

    #[test]
    fn residual_bounds_hand_evaluation() {
        let z = lemma_ef_residual_bound(1.0, 7, 3.0).unwrap();
        assert_eq!((z.worker, z.server, z.combined), (0.0, 0.0, 0.0));

        let b = lemma_ef_residual_bound(0.75, 1, 1.0).unwrap();
        assert!((b.worker - 1.0).abs() < 1e-12);
        assert!((b.server - 4.0).abs() < 1e-12);
        assert!((b.combined - 5.0).abs() < 1e-12);

        let doubled = lemma_ef_residual_bound(0.75, 1, 2.0).unwrap();
        assert!((doubled.worker - 2.0 * b.worker).abs() < 1e-12);
        assert!((doubled.server - 2.0 * b.server).abs() < 1e-12);
    }

    #[test]
    fn moment_gap_monitor_equality_case() {
        // beta1 -> 0: the bound collapses to |p - grad| and mhat = p.
        let mut i = inputs(2);
        i.beta1 = 1e-9;
        let sample = MomentGapSample {
            mhat: vec![0.5, -0.25],
            estimate: vec![0.5, -0.25],
            oracle_grad: vec![0.4, -0.5],
        };
        let r = lemma_moment_gap_monitor(&[sample], &i).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.worst_margin.abs() < 1e-6, "{}", r.worst_margin);
    }

    #[test]
    fn moment_gap_monitor_first_step_identity() {
        let i = inputs(2);
        let sample = MomentGapSample {
            mhat: vec![1.0, 2.0],
            estimate: vec![1.0, 2.0],
            oracle_grad: vec![1.0, 2.0],
        };
        let r = lemma_moment_gap_monitor(&[sample], &i).unwrap();
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn scaling_efficiency_cases() {
        assert_eq!(ideal_scaling_efficiency(1.0, 2.0, 1.5).unwrap(), 1.0);
        assert_eq!(ideal_scaling_efficiency(1.0, 1.0, 3.0).unwrap(), 0.5);
        assert!(matches!(
            ideal_scaling_efficiency(0.0, 1.0, 1.0),
            Err(Error::NonPositiveTime("t_fp"))
        ));
        assert!(matches!(
            ideal_scaling_efficiency(1.0, -1.0, 1.0),
            Err(Error::NonPositiveTime("t_bp"))
        ));
    }

    #[test]
    fn compression_rate_arithmetic() {
        assert_eq!(compression_rate(CompressorKind::None, 1000, Baseline::Fp32).unwrap(), 1.0);
        let sign =
            compression_rate(CompressorKind::ScaledSign, 1_000_000, Baseline::Fp32).unwrap();
        assert!((31.9..=32.0).contains(&sign), "{sign}");
        let topk = compression_rate(
            CompressorKind::TopK {
                k: SparseBudget::Fraction(0.001),
                precision: ValuePrecision::F16,
            },
            1_000_000,
            Baseline::Fp16,
        )
        .unwrap();
        assert!((330.0..=336.0).contains(&topk), "{topk}");
    }
}
