//! Simulation toolkit for compressed decentralized optimization with
//! gradient tracking.
//!
//! The modules build on each other bottom-up: dense linear algebra,
//! communication topologies and mixing matrices, compression operators,
//! local objectives, datasets, the optimizers themselves, and per-round
//! diagnostics. [`runner`] ties them together for whole experiments.

pub mod algorithms;
pub mod compression;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod oracles;
pub mod rng;
pub mod runner;
pub mod topology;

pub use algorithms::{
    beer_init, beer_step, choco_step, d2_step, dsgd_step, search_rate_constants, step,
    theoretical_stepsizes, verify_rate_constants, AlgoState, Algorithm, Env, Feasibility,
    HyperParams, RateConstants,
};
pub use compression::Compressor;
pub use data::{parse_libsvm, partition_unshuffled, synth_quadratic, Dataset, QuadraticInstance};
pub use diagnostics::{omegas, write_csv, LyapunovSpec, MetricsRow, OmegaVector, CSV_HEADER};
pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use oracles::{Batch, Objective, Shard, SmoothnessInfo};
pub use rng::{Purpose, RngStream};
pub use runner::{run, run_observed, Problem, RunSpec};
pub use topology::{build_graph, metropolis_weights, Graph, GraphKind, MixingMatrix};
