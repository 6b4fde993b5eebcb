//! Fixtures shared by the criterion benches.

use declab_core::data::census_like_dataset;
use declab_core::{metropolis_weights, build_graph, partition_unshuffled, GraphKind, MixingMatrix, Objective, Shard};

/// Logistic-regression workload: `n` clients on a ring, census-like data.
pub struct Workload {
    pub mixing: MixingMatrix,
    pub objective: Objective,
    pub shards: Vec<Shard>,
}

pub fn logistic_workload(n: usize, samples: usize, seed: u64) -> Workload {
    let ds = census_like_dataset(samples, seed);
    let shards = partition_unshuffled(&ds, n).expect("enough samples");
    let graph = build_graph(GraphKind::Ring, n, None, seed).expect("ring");
    Workload {
        mixing: metropolis_weights(&graph).expect("connected"),
        objective: Objective::LogRegNcvx { reg: 0.05, d: ds.dim() },
        shards,
    }
}
