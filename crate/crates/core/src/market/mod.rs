//! Synthetic market generation: nodal loads, randomized bids, hourly DC-OPF
//! solves and the resulting price decomposition.

pub mod dataset;
pub mod dispatch;
pub mod loads;
pub mod qp;

pub use dataset::{
    generate_dataset, read_dataset, select_congested_lines, write_dataset, GenConfig, Generated,
    HourRange, MarketDataset, SelectedLine, Split,
};
pub use dispatch::{
    bid_coefficients, solve_dcopf, BidCurve, DispatchRecord, LineLimits, Network, SolverStatus,
    DUAL_TOL,
};
pub use loads::{
    source_load_provider, synthesize_loads, synthesize_weights, DirichletMixer, LoadMatrix,
    SourceLoads, SyntheticLoadConfig,
};

use crate::grid::GridError;

#[derive(Debug, thiserror::Error)]
pub enum MarketError {
    #[error("{0}")]
    Io(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("source loads are missing hours: {}", .0.join(", "))]
    MissingHours(Vec<String>),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("unconstrained dispatch failed at hour {hour}: {msg}")]
    Unsolvable { hour: usize, msg: String },
    #[error("{failed} of {total} hours failed to solve (limit 1%); first failure: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },
}

/// Derives an independent seed for a named component from the global seed.
///
/// Every random stream in the crate is `ChaCha8Rng::seed_from_u64(derive_seed(seed, label))`,
/// so a component can be reproduced in isolation from the global seed alone.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, folded into the seed with a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
