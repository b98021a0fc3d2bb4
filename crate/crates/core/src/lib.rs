//! Quantum-accelerated Markov chain Monte Carlo at desk scale.
//!
//! Quantum subroutines come in two flavours. Jordan's gradient algorithm is
//! simulated exactly on a complex statevector for small grids. Mean estimation
//! and phase oracles are emulated at the level of their statistical contract,
//! with the quantum query cost written to a [`QueryLedger`].
//!
//! Module map:
//! - [`potentials`]: target potentials, gradient and evaluation oracles.
//! - [`qme`]: query ledger, mean-estimation emulator, phase-oracle charges.
//! - [`jordan`]: statevector simulation of Jordan's gradient estimation.
//! - [`gradest`]: smoothing, phase-pipeline, robust and MLMC estimators.
//! - [`samplers`]: HMC / LMC chains and their gradient providers.
//! - [`metrics`]: W2, KL, TV and slope fitting.
//! - [`optimizer`]: approximate-convex minimization by Gibbs sampling.
//! - [`harness`]: configuration, experiments and CSV/JSON output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradest;
pub mod harness;
pub mod jordan;
pub mod linalg;
pub mod metrics;
pub mod optimizer;
pub mod potentials;
pub mod qme;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
pub use gradest::{Alg4Params, BiasFlag, GradEstimate};
pub use jordan::{GridSpec, Statevector};
pub use metrics::{MetricKind, MetricReport};
pub use num_complex::Complex64;
pub use optimizer::OptimizeConfig;
pub use potentials::{ModelKind, PotentialModel, SeedPurpose, StochasticSeed};
pub use qme::{OracleKind, QmeRequest, QueryLedger};
pub use rng::SimRng;
pub use samplers::{ChainState, HyperParams, Theorem};
