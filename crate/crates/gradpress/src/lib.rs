//! Gradient-compression codecs with a deterministic multi-worker
//! parameter-server simulator, layer-wise adaptive optimizers, and
//! verifiers for their convergence-bound constants.
//!
//! The crate is organized in five layers:
//!
//! - foundation types ([`vector`], [`partition`], [`rng`]);
//! - compression operators and their bit-exact wire format ([`compress`]);
//! - aggregation protocols over in-process and TCP transports, with
//!   two-way compression and error feedback ([`protocol`]);
//! - layer-wise adaptive optimizers driven by those protocols ([`optim`]);
//! - bound calculators, empirical monitors, and the experiment harness
//!   ([`analysis`], [`harness`]).
//!
//! Data-parallel kernels run on rayon when the `parallel` feature
//! (default) is enabled and fall back to sequential loops otherwise;
//! results are bit-identical either way.

pub mod analysis;
pub mod compress;
pub mod error;
mod exec;
pub mod harness;
pub mod optim;
pub mod partition;
pub mod protocol;
pub mod rng;
pub mod vector;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Execution;
pub use partition::{make_partition, BlockPartition};
pub use rng::{DeterministicRng, StreamKey};
pub use vector::GradientVector;
