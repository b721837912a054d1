//! Partitioned variational inference (PVI) for federated Bayesian learning.
//!
//! A server holds a mean-field Gaussian posterior `q = prior * prod_m t_m`
//! where each `t_m` is an approximate likelihood owned by client `m`.
//! Clients refine their factor against a cavity built from the current
//! posterior and send back natural-parameter deltas.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod error;
pub mod expfam;
pub mod harness;
pub mod localopt;
pub mod models;
pub mod oracle;
pub mod server;

pub use error::{PviError, Result};
pub use expfam::{combine, divide, ApproxFactor, GaussianMeanField, MeanParams, NaturalParams};
pub use models::{Dataset, ModelKind, ModelSpec};

pub(crate) mod seeds {
    /// SplitMix64 finalizer used to derive independent stream seeds.
    pub fn mix(a: u64, b: u64) -> u64 {
        let mut z = a
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}
