//! Solver for a heterogeneous-agent growth economy with aggregate productivity
//! shocks, in which the value of an individual household depends on the whole
//! cross-sectional distribution of wealth and productivity.
//!
//! The building blocks are:
//!
//! - [`measures`]: finite-dimensional probability measures on a wealth interval
//!   with point masses at both endpoints and piecewise-constant densities in
//!   between, one component per productivity level.
//! - [`economy`]: closed-form model primitives (Cobb-Douglas production, factor
//!   prices, CRRA utility, the consumption Hamiltonian, and the constrained
//!   optimal consumption rule).
//! - [`transport`]: one-step semi-Lagrangian push-forward of a discrete measure
//!   under a savings policy, including productivity switching.
//! - [`neuralnet`]: a from-scratch structured feedforward network with exact
//!   backpropagation for both parameters and the wealth input, plus Adam
//!   ([`optim`]) and binary checkpoints ([`checkpoint`]).
//! - [`aiyagari`]: the stationary equilibrium of the no-aggregate-shock
//!   baseline, used to calibrate the measure grid and as a comparison policy.
//! - [`solver`]: sample generation, Bellman targets, and the outer fixed-point
//!   loop that trains one network per (aggregate state, productivity) pair.
//! - [`export`]: deterministic CSV exports of policy surfaces and feature
//!   diagnostics from a finished run directory.
//!
//! All randomness is driven by explicitly seeded ChaCha streams derived from a
//! single master seed, so runs are reproducible bit for bit.

pub mod aiyagari;
pub mod checkpoint;
pub mod economy;
pub mod error;
pub mod export;
pub mod jsonfmt;
pub mod measures;
pub mod neuralnet;
pub mod optim;
pub mod samples;
pub mod solver;
pub mod transport;

pub use error::{Error, Result};

/// Derives an independent 64-bit seed from a master seed and a stream tag.
///
/// Sequential splitmix64 steps keyed by the tag words; any two distinct tags
/// give uncorrelated streams for the same master seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master ^ 0x9e37_79b9_7f4a_7c15);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t.wrapping_add(0x2545_f491_4f6c_dd1d)));
    }
    s
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
