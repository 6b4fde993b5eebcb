//! Drives an algorithm for a number of rounds and collects metric rows.

use std::time::Instant;

use crate::algorithms::{beer_init, round_bits, step, AlgoState, Algorithm, Env, HyperParams};
use crate::compression::Compressor;
use crate::diagnostics::{grad_norm_at_mean, lyapunov_from, omegas, LyapunovSpec, MetricsRow};
use crate::error::{Error, Result};
use crate::linalg::{column_mean, Vector};
use crate::oracles::{Objective, Shard};
use crate::rng::RngStream;
use crate::topology::MixingMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub algorithm: Algorithm,
    pub hp: HyperParams,
    pub rounds: usize,
    pub x0: Vector,
    pub seed: u64,
    pub parallel: bool,
    /// Known or reference minimum; enables the `fval_gap` column.
    pub fstar: Option<f64>,
    pub lyapunov: Option<LyapunovSpec>,
    /// Charge each broadcast once per neighbor instead of once.
    pub per_edge_bits: bool,
    /// Emit a row every this many rounds (round 0 and the last round are
    /// always emitted).
    pub metrics_every: usize,
    /// Fill `wall_ms` with elapsed time. Off by default so that output is a
    /// pure function of the inputs.
    pub record_time: bool,
    /// Stop at the first emitted row whose `fval_gap` is below this.
    pub stop_below_gap: Option<f64>,
}

impl RunSpec {
    pub fn new(algorithm: Algorithm, hp: HyperParams, rounds: usize, x0: Vector, seed: u64) -> Self {
        RunSpec {
            algorithm,
            hp,
            rounds,
            x0,
            seed,
            parallel: false,
            fstar: None,
            lyapunov: None,
            per_edge_bits: false,
            metrics_every: 1,
            record_time: false,
            stop_below_gap: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub mixing: &'a MixingMatrix,
    pub objective: &'a Objective,
    pub shards: &'a [Shard],
    pub compressor: &'a Compressor,
    /// Held-out data for the `test_accuracy` column (logistic only).
    pub test: Option<&'a [Shard]>,
}

fn metrics(
    s: &AlgoState,
    spec: &RunSpec,
    problem: &Problem,
    cum_bits: u64,
    start: Instant,
) -> Result<MetricsRow> {
    let obj = problem.objective;
    let xbar = column_mean(&s.x);
    let om = omegas(s);
    let fval = if spec.fstar.is_some() || spec.lyapunov.is_some() {
        Some(obj.global_value(problem.shards, &xbar)?)
    } else {
        None
    };
    let gap = spec.fstar.zip(fval).map(|(f, v)| v - f);
    let lyapunov = spec
        .lyapunov
        .zip(fval)
        .map(|(l, v)| lyapunov_from(v - l.fstar, &om, &l, s.n()));
    let test_accuracy = match problem.test {
        Some(t) if obj.is_logistic() => Some(obj.accuracy(t, &xbar)?),
        _ => None,
    };
    Ok(MetricsRow {
        round: s.round,
        cum_bits,
        grad_norm_sq: grad_norm_at_mean(s, obj, problem.shards)?,
        fval_gap: gap,
        omegas: om,
        lyapunov,
        test_accuracy,
        wall_ms: if spec.record_time {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        },
    })
}

/// Runs `spec.rounds` rounds. `observe` sees every state (not only the
/// emitted ones) together with the row computed for it when one is
/// emitted.
pub fn run_observed<F>(spec: &RunSpec, problem: &Problem, mut observe: F) -> Result<Vec<MetricsRow>>
where
    F: FnMut(&AlgoState, Option<&MetricsRow>) -> Result<()>,
{
    if spec.metrics_every == 0 {
        return Err(Error::invalid("metrics_every must be >= 1"));
    }
    let env = Env {
        mixing: problem.mixing,
        objective: problem.objective,
        shards: problem.shards,
        compressor: problem.compressor,
        rng: RngStream::new(spec.seed),
        parallel: spec.parallel,
    };
    let per_round = round_bits(
        spec.algorithm,
        problem.compressor,
        problem.objective.dim(),
        problem.mixing,
        spec.per_edge_bits,
    );
    let start = Instant::now();
    let mut state = beer_init(&spec.x0, &env, &spec.hp)?;
    let mut rows = Vec::with_capacity(spec.rounds / spec.metrics_every + 2);
    let first = metrics(&state, spec, problem, 0, start)?;
    observe(&state, Some(&first))?;
    rows.push(first);
    for t in 1..=spec.rounds {
        state = step(spec.algorithm, state, &env, &spec.hp)?;
        if t % spec.metrics_every == 0 || t == spec.rounds {
            let row = metrics(&state, spec, problem, per_round * t as u64, start)?;
            observe(&state, Some(&row))?;
            let done = matches!((spec.stop_below_gap, row.fval_gap), (Some(tol), Some(gap)) if gap < tol);
            rows.push(row);
            if done {
                break;
            }
        } else {
            observe(&state, None)?;
        }
    }
    Ok(rows)
}

pub fn run(spec: &RunSpec, problem: &Problem) -> Result<Vec<MetricsRow>> {
    run_observed(spec, problem, |_, _| Ok(()))
}
