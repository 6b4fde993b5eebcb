//! Decentralized optimizers sharing one state layout: BEER, CHOCO-SGD,
//! DSGD and D², plus step-size rules and the constant-feasibility systems
//! behind the convergence rates.
//!
//! Matrices are `d x n`; column `i` belongs to client `i`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::Compressor;
use crate::diagnostics::recursion_system;
use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, matmul, Matrix, Vector};
use crate::oracles::{Batch, Objective, SampleSet, Shard};
use crate::rng::{Purpose, RngStream};
use crate::topology::MixingMatrix;

/// Iterates whose Frobenius norm exceeds this are treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Beer,
    Choco,
    Dsgd,
    D2,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "beer" => Ok(Algorithm::Beer),
            "choco" => Ok(Algorithm::Choco),
            "dsgd" => Ok(Algorithm::Dsgd),
            "d2" => Ok(Algorithm::D2),
            other => Err(Error::invalid(format!(
                "unknown algorithm {other:?} (expected beer, choco, dsgd or d2)"
            ))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Beer => "beer",
            Algorithm::Choco => "choco",
            Algorithm::Dsgd => "dsgd",
            Algorithm::D2 => "d2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta: f64,
    pub gamma: f64,
    pub batch: Batch,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.batch == Batch::Size(0) {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Everything a round needs besides the state itself.
#[derive(Debug, Clone, Copy)]
pub struct Env<'a> {
    pub mixing: &'a MixingMatrix,
    pub objective: &'a Objective,
    pub shards: &'a [Shard],
    pub compressor: &'a Compressor,
    /// Master stream; per-client, per-round substreams are derived from it.
    pub rng: RngStream,
    /// Evaluate clients and compress columns on the rayon pool. Results do
    /// not depend on this flag.
    pub parallel: bool,
}

impl Env<'_> {
    pub fn n(&self) -> usize {
        self.shards.len()
    }

    pub fn d(&self) -> usize {
        self.objective.dim()
    }

    fn check(&self) -> Result<()> {
        if self.shards.is_empty() {
            return Err(Error::invalid("no clients"));
        }
        if self.mixing.n() != self.shards.len() {
            return Err(Error::DimensionMismatch {
                op: "mixing matrix vs clients",
                left: (self.mixing.n(), self.mixing.n()),
                right: (self.shards.len(), 1),
            });
        }
        self.compressor.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgoState {
    pub x: Matrix,
    pub v: Matrix,
    pub h: Matrix,
    pub g: Matrix,
    /// The stochastic gradients sampled at `x` this round.
    pub cached_grad: Matrix,
    pub cached_samples: Vec<SampleSet>,
    pub round: usize,
    /// Previous iterate and its gradient (D² only).
    pub prev_x: Option<Matrix>,
    pub prev_grad: Option<Matrix>,
}

impl AlgoState {
    pub fn d(&self) -> usize {
        self.x.rows()
    }

    pub fn n(&self) -> usize {
        self.x.cols()
    }
}

/// One stochastic gradient per client at the columns of `x`, drawn from the
/// `(client, round)` minibatch substream.
pub fn sample_gradients(env: &Env, batch: Batch, x: &Matrix, round: usize) -> Result<(Matrix, Vec<SampleSet>)> {
    let eval = |i: usize| {
        let rng = env.rng.for_client(Purpose::Minibatch, i, round);
        env.objective
            .minibatch_gradient(&env.shards[i], &x.column(i), batch, &rng)
    };
    let results: Vec<Result<(Vector, SampleSet)>> = if env.parallel {
        (0..env.n()).into_par_iter().map(eval).collect()
    } else {
        (0..env.n()).map(eval).collect()
    };
    let mut grads = Matrix::zeros(env.d(), env.n());
    let mut samples = Vec::with_capacity(env.n());
    for (i, r) in results.into_iter().enumerate() {
        let (g, s) = r?;
        grads.set_column(i, &g);
        samples.push(s);
    }
    Ok((grads, samples))
}

fn compress_columns(env: &Env, m: &Matrix, purpose: Purpose, round: usize) -> Result<Matrix> {
    let rng = env.rng.for_client(purpose, 0, round);
    if !env.parallel {
        return env.compressor.compress_matrix(m, &rng);
    }
    let cols: Vec<Result<Vec<f64>>> = (0..m.cols())
        .into_par_iter()
        .map(|j| env.compressor.compress_slice(&m.column(j), &rng.derive(j as u64)))
        .collect();
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (j, c) in cols.into_iter().enumerate() {
        out.set_column(j, &c?);
    }
    Ok(out)
}

/// `M (W - I)`: the change of `M` under one gossip round.
fn gossip_delta(m: &Matrix, mixing: &MixingMatrix) -> Result<Matrix> {
    matmul(m, &mixing.laplacian_like())
}

fn guard(m: &Matrix, what: &str, round: usize) -> Result<()> {
    if !m.is_finite() {
        return Err(Error::Diverged {
            round,
            reason: format!("non-finite entry in {what}"),
        });
    }
    let norm = frobenius_sq(m).sqrt();
    if norm > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            round,
            reason: format!("||{what}||_F = {norm:e} exceeds {DIVERGENCE_LIMIT:e}"),
        });
    }
    Ok(())
}

/// Consensus start `X = x0 1^T`, `H = G = 0`, and `V` equal to the gradients
/// sampled at round 0. Shared by every algorithm.
pub fn beer_init(x0: &Vector, env: &Env, hp: &HyperParams) -> Result<AlgoState> {
    env.check()?;
    hp.validate()?;
    if x0.dim() != env.d() {
        return Err(Error::DimensionMismatch {
            op: "initial point",
            left: (x0.dim(), 1),
            right: (env.d(), 1),
        });
    }
    let (d, n) = (env.d(), env.n());
    let x = Matrix::repeat_column(x0, n);
    let (grad, samples) = sample_gradients(env, hp.batch, &x, 0)?;
    Ok(AlgoState {
        x,
        v: grad.clone(),
        h: Matrix::zeros(d, n),
        g: Matrix::zeros(d, n),
        cached_grad: grad,
        cached_samples: samples,
        round: 0,
        prev_x: None,
        prev_grad: None,
    })
}

/// `S + C(target - S)`. Without compression this is `target` itself,
/// returned verbatim rather than through a rounding round trip.
fn surrogate_update(env: &Env, surrogate: &Matrix, target: &Matrix, purpose: Purpose, round: usize) -> Result<Matrix> {
    if matches!(env.compressor, Compressor::Identity) {
        return Ok(target.clone());
    }
    let q = compress_columns(env, &target.sub(surrogate)?, purpose, round)?;
    surrogate.add(&q)
}

/// Model half-step shared by BEER and CHOCO:
/// `X' = X + gamma H (W - I) - eta V`, then `H' = H + C(X' - H)`.
fn model_update(s: &AlgoState, env: &Env, hp: &HyperParams, next: usize) -> Result<(Matrix, Matrix)> {
    let mut x = s.x.clone();
    x.axpy(hp.gamma, &gossip_delta(&s.h, env.mixing)?)?;
    x.axpy(-hp.eta, &s.v)?;
    guard(&x, "X", next)?;
    let h = surrogate_update(env, &s.h, &x, Purpose::CompressModel, next)?;
    Ok((x, h))
}

/// One BEER round. The gradient subtracted in the tracking update is the
/// cached draw from the previous round, never a fresh sample at the old
/// point; this keeps `mean(V) == mean(cached_grad)` exact.
pub fn beer_step(s: AlgoState, env: &Env, hp: &HyperParams) -> Result<AlgoState> {
    let next = s.round + 1;
    let (x, h) = model_update(&s, env, hp, next)?;

    let (grad, samples) = sample_gradients(env, hp.batch, &x, next)?;
    let mut v = s.v.clone();
    v.axpy(hp.gamma, &gossip_delta(&s.g, env.mixing)?)?;
    v.axpy(1.0, &grad)?;
    v.axpy(-1.0, &s.cached_grad)?;
    guard(&v, "V", next)?;
    let g = surrogate_update(env, &s.g, &v, Purpose::CompressTracker, next)?;

    Ok(AlgoState {
        x,
        v,
        h,
        g,
        cached_grad: grad,
        cached_samples: samples,
        round: next,
        prev_x: None,
        prev_grad: None,
    })
}

/// BEER without the tracker: `V'` is the fresh gradient at `X'`.
pub fn choco_step(s: AlgoState, env: &Env, hp: &HyperParams) -> Result<AlgoState> {
    let next = s.round + 1;
    let (x, h) = model_update(&s, env, hp, next)?;
    let (grad, samples) = sample_gradients(env, hp.batch, &x, next)?;
    Ok(AlgoState {
        x,
        v: grad.clone(),
        h,
        g: s.g,
        cached_grad: grad,
        cached_samples: samples,
        round: next,
        prev_x: None,
        prev_grad: None,
    })
}

/// `X' = X W - eta g(X)`, uncompressed.
pub fn dsgd_step(s: AlgoState, env: &Env, hp: &HyperParams) -> Result<AlgoState> {
    let next = s.round + 1;
    let mut x = matmul(&s.x, env.mixing.weights())?;
    x.axpy(-hp.eta, &s.cached_grad)?;
    guard(&x, "X", next)?;
    let (grad, samples) = sample_gradients(env, hp.batch, &x, next)?;
    Ok(AlgoState {
        x: x.clone(),
        v: grad.clone(),
        h: x,
        g: s.g,
        cached_grad: grad,
        cached_samples: samples,
        round: next,
        prev_x: Some(s.x),
        prev_grad: Some(s.cached_grad),
    })
}

/// `X' = (2X - X_prev - eta (g(X) - g(X_prev))) W`; the first round is a
/// DSGD step.
pub fn d2_step(s: AlgoState, env: &Env, hp: &HyperParams) -> Result<AlgoState> {
    let (Some(prev_x), Some(prev_grad)) = (&s.prev_x, &s.prev_grad) else {
        return dsgd_step(s, env, hp);
    };
    let next = s.round + 1;
    let mut inner = s.x.scaled(2.0);
    inner.axpy(-1.0, prev_x)?;
    inner.axpy(-hp.eta, &s.cached_grad)?;
    inner.axpy(hp.eta, prev_grad)?;
    let x = matmul(&inner, env.mixing.weights())?;
    guard(&x, "X", next)?;
    let (grad, samples) = sample_gradients(env, hp.batch, &x, next)?;
    Ok(AlgoState {
        x: x.clone(),
        v: grad.clone(),
        h: x,
        g: s.g,
        cached_grad: grad,
        cached_samples: samples,
        round: next,
        prev_x: Some(s.x),
        prev_grad: Some(s.cached_grad),
    })
}

pub fn step(algo: Algorithm, s: AlgoState, env: &Env, hp: &HyperParams) -> Result<AlgoState> {
    match algo {
        Algorithm::Beer => beer_step(s, env, hp),
        Algorithm::Choco => choco_step(s, env, hp),
        Algorithm::Dsgd => dsgd_step(s, env, hp),
        Algorithm::D2 => d2_step(s, env, hp),
    }
}

/// Bits put on the wire in one round, summed over clients.
///
/// BEER broadcasts two compressed vectors per client, CHOCO one, and the
/// uncompressed baselines one dense vector. Under per-edge accounting each
/// broadcast is charged once per neighbor.
pub fn round_bits(algo: Algorithm, comp: &Compressor, d: usize, mixing: &MixingMatrix, per_edge: bool) -> u64 {
    let (messages, bits) = match algo {
        Algorithm::Beer => (2, comp.message_bits(d)),
        Algorithm::Choco => (1, comp.message_bits(d)),
        Algorithm::Dsgd | Algorithm::D2 => (1, crate::compression::dense_bits(d)),
    };
    let fanout: u64 = if per_edge {
        mixing.degrees().iter().map(|&k| k as u64).sum()
    } else {
        mixing.n() as u64
    };
    messages * bits * fanout
}

/// `gamma = c_gamma alpha rho` (at most 1) and `eta = c_eta gamma rho^2 / L`.
/// Defaults: `c_gamma = 1/(6 sqrt(C))`, `c_eta = 1/9`. The returned batch is
/// `Full`; callers substitute their own.
pub fn theoretical_stepsizes(
    alpha: f64,
    rho: f64,
    c: f64,
    l: f64,
    c_gamma: Option<f64>,
    c_eta: Option<f64>,
) -> Result<HyperParams> {
    if l.is_nan() || l <= 0.0 {
        return Err(Error::invalid(format!("L must be > 0, got {l}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) || !(rho > 0.0 && rho <= 1.0) || c < 0.0 {
        return Err(Error::invalid(format!(
            "need alpha, rho in (0, 1] and C >= 0; got alpha={alpha}, rho={rho}, C={c}"
        )));
    }
    let c_gamma = c_gamma.unwrap_or_else(|| 1.0 / (6.0 * c.sqrt()));
    let c_eta = c_eta.unwrap_or(1.0 / 9.0);
    if c_gamma.is_nan() || c_eta.is_nan() || c_gamma <= 0.0 || c_eta <= 0.0 {
        return Err(Error::invalid("c_gamma and c_eta must be > 0"));
    }
    let gamma = (c_gamma * alpha * rho).min(1.0);
    Ok(HyperParams {
        eta: c_eta * gamma * rho * rho / l,
        gamma,
        batch: Batch::Full,
    })
}

/// Outcome of a constant-feasibility check: one slack per inequality
/// (left side minus right side).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub slacks: Vec<f64>,
    pub feasible: bool,
}

impl Feasibility {
    fn from_slacks(slacks: Vec<f64>) -> Self {
        let feasible = slacks.iter().all(|&s| s >= 0.0);
        Feasibility { slacks, feasible }
    }
}

/// Coefficient rows and right-hand side of the reduced sufficient system in
/// `(c1..c4)`; with `kappa` the diagonal carries the linear-rate terms.
fn reduced_system(c_gamma: f64, c_eta: f64, c: f64, kappa: Option<f64>) -> ([[f64; 4]; 5], [f64; 5]) {
    let (cg, ce) = (c_gamma, c_eta);
    let (d12, d3, d4) = match kappa {
        Some(k) => (1.0 - 4.0 * ce * cg / k, 1.0 - 2.0 * ce / k, 1.0 - 4.0 * ce / k),
        None => (1.0, 1.0, 1.0),
    };
    let m = [
        [d12, -72.0 * c * cg * cg, -24.0 * c * cg, -72.0 * c * cg],
        [0.0, d12, 0.0, -24.0 * c * cg],
        [-12.0 * c * cg, -35.0 * c * cg, d3, -36.0 * c],
        [-24.0 * ce * ce * cg, -24.0 * cg * (1.0 + 3.0 * ce * ce), -24.0 * ce * ce, d4],
        [-12.0 * ce * cg, -36.0 * ce * cg, 0.0, -36.0 * ce],
    ];
    let rhs = [0.0, 0.0, ce, 0.0, -1.0 + ce * cg];
    (m, rhs)
}

/// Evaluates the reduced 5x4 inequality system literally.
pub fn verify_rate_constants(
    consts: [f64; 4],
    c_gamma: f64,
    c_eta: f64,
    c: f64,
    kappa: Option<f64>,
) -> Feasibility {
    let (m, rhs) = reduced_system(c_gamma, c_eta, c, kappa);
    let slacks = m
        .iter()
        .zip(rhs)
        .map(|(row, r)| row.iter().zip(consts).map(|(a, x)| a * x).sum::<f64>() - r)
        .collect();
    Feasibility::from_slacks(slacks)
}

/// Smallest `(c1..c4)` meeting the first four reduced rows with a relative
/// margin, or `None` when no nonnegative solution exists.
///
/// Rows 1-4 read `diag_i c_i >= sum_j M_ij c_j + r_i` with `M >= 0`, so the
/// least solution is the limit of the fixed-point iteration from zero; it
/// exists exactly when that iteration converges. The last row then decides
/// feasibility.
pub fn minimal_rate_constants(c_gamma: f64, c_eta: f64, c: f64, kappa: Option<f64>) -> Option<[f64; 4]> {
    const MARGIN: f64 = 1e-6;
    let (m, rhs) = reduced_system(c_gamma, c_eta, c, kappa);
    if (0..4).any(|i| m[i][i] <= 0.0) {
        return None;
    }
    let mut x = [0.0f64; 4];
    for _ in 0..100_000 {
        let mut next = [0.0; 4];
        for i in 0..4 {
            let pushed: f64 = (0..4).filter(|&j| j != i).map(|j| -m[i][j] * x[j]).sum();
            next[i] = (1.0 + MARGIN) * (pushed + rhs[i]) / m[i][i];
        }
        if next.iter().any(|v| !v.is_finite() || *v > 1e12) {
            return None;
        }
        let change = (0..4).map(|i| (next[i] - x[i]).abs()).fold(0.0, f64::max);
        let scale = next.iter().fold(0.0f64, |a, &b| a.max(b));
        x = next;
        if change <= 1e-15 * scale {
            return Some(x);
        }
    }
    None
}

/// A verified tuple for the reduced system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateConstants {
    pub c_gamma: f64,
    pub c_eta: f64,
    pub c: [f64; 4],
    pub slacks: Vec<f64>,
}

/// Searches `c_gamma, c_eta` over `{2^-k : 0 <= k <= max_k}`, pairing each
/// with [`minimal_rate_constants`], and keeps the feasible pair with the
/// largest product `c_gamma c_eta` (ties: larger `c_gamma`).
pub fn search_rate_constants(c: f64, kappa: Option<f64>, max_k: u32) -> Option<RateConstants> {
    let mut best: Option<RateConstants> = None;
    for kg in 0..=max_k {
        for ke in 0..=max_k {
            let cg = 0.5f64.powi(kg as i32);
            let ce = 0.5f64.powi(ke as i32);
            let Some(consts) = minimal_rate_constants(cg, ce, c, kappa) else {
                continue;
            };
            let check = verify_rate_constants(consts, cg, ce, c, kappa);
            if !check.feasible {
                continue;
            }
            let better = match &best {
                None => true,
                Some(b) => {
                    let (p, q) = (cg * ce, b.c_gamma * b.c_eta);
                    p > q || (p == q && cg > b.c_gamma)
                }
            };
            if better {
                best = Some(RateConstants {
                    c_gamma: cg,
                    c_eta: ce,
                    c: consts,
                    slacks: check.slacks,
                });
            }
        }
    }
    best
}

/// Problem quantities entering the Lyapunov descent system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    pub alpha: f64,
    pub rho: f64,
    pub c: f64,
    pub l: f64,
    pub n: usize,
    pub gamma: f64,
    pub eta: f64,
}

/// Lyapunov weights `s = [c1 L/n, c2 rho^2/(nL), c3 L/n, c4 rho^e/(nL)]`.
pub fn lyapunov_weights(consts: [f64; 4], rho: f64, l: f64, n: usize, exponent: i32) -> [f64; 4] {
    let n = n as f64;
    [
        consts[0] * l / n,
        consts[1] * rho * rho / (n * l),
        consts[2] * l / n,
        consts[3] * rho.powi(exponent) / (n * l),
    ]
}

/// The unreduced conditions under which the Lyapunov function descends
/// by `eta/2 ||grad f||^2` per round (or contracts by `1 - mu eta` when
/// `mu` is given): componentwise `s^T (A - (1 - mu eta) I) + q^T <= 0` and
/// `eta/2 - eta^2 L/2 - s^T b1 >= 0`. Slacks are oriented so that `>= 0`
/// means satisfied.
pub fn verify_descent_system(s: [f64; 4], p: &SystemParams, mu: Option<f64>) -> Feasibility {
    let (a, b1, _) = recursion_system(p.alpha, p.gamma, p.eta, p.rho, p.c, p.l, p.n);
    let shift = 1.0 - mu.map_or(0.0, |m| m * p.eta);
    let q = [0.0, 0.0, p.eta * p.l * p.l / (2.0 * p.n as f64), 0.0];
    let mut slacks: Vec<f64> = (0..4)
        .map(|j| {
            let col: f64 = (0..4).map(|i| s[i] * a[i][j]).sum::<f64>() - shift * s[j];
            -(col + q[j])
        })
        .collect();
    let sb1: f64 = (0..4).map(|i| s[i] * b1[i]).sum();
    slacks.push(p.eta / 2.0 - p.eta * p.eta * p.l / 2.0 - sb1);
    Feasibility::from_slacks(slacks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::column_mean;
    use crate::topology::{build_graph, metropolis_weights, GraphKind};

    fn scalar_shards(centers: &[f64]) -> Vec<Shard> {
        // f_i(x) = 1/2 (x - c_i)^2 as a 1x1 least-squares shard
        centers
            .iter()
            .enumerate()
            .map(|(i, &c)| Shard::new(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), vec![c], i).unwrap())
            .collect()
    }

    #[test]
    fn parse_algorithm_names() {
        for a in [Algorithm::Beer, Algorithm::Choco, Algorithm::Dsgd, Algorithm::D2] {
            assert_eq!(a.to_string().parse::<Algorithm>().unwrap(), a);
        }
        assert!("adam".parse::<Algorithm>().is_err());
    }

    /// Executes the update lines one by one on plain floats.
    #[test]
    fn beer_hand_step() {
        let shards = scalar_shards(&[0.0, 2.0]);
        let w = Matrix::from_vec(2, 2, vec![0.5; 4]).unwrap();
        let mixing = MixingMatrix::new(w).unwrap();
        let obj = Objective::Quadratic { d: 1 };
        let env = Env {
            mixing: &mixing,
            objective: &obj,
            shards: &shards,
            compressor: &Compressor::Identity,
            rng: RngStream::new(0),
            parallel: false,
        };
        let hp = HyperParams { eta: 0.1, gamma: 1.0, batch: Batch::Full };
        let s0 = beer_init(&Vector::from_vec(vec![0.0]), &env, &hp).unwrap();
        assert_eq!(s0.v.as_slice(), &[0.0, -2.0]);

        // scripted: X1 = X0 + gamma*H0*(W-I) - eta*V0 with H0 = 0
        let c = [0.0, 2.0];
        let mut x = [0.0, 0.0];
        let mut h = [0.0, 0.0];
        let mut v = [0.0 - c[0], 0.0 - c[1]];
        let mut g = [0.0, 0.0];
        let mut grad = v;
        let mut state = s0;
        for _ in 0..5 {
            let mix = |m: [f64; 2]| {
                let avg = 0.5 * (m[0] + m[1]);
                [avg - m[0], avg - m[1]]
            };
            let hd = mix(h);
            let xn = [x[0] + hd[0] - 0.1 * v[0], x[1] + hd[1] - 0.1 * v[1]];
            let hn = xn;
            let gn = [xn[0] - c[0], xn[1] - c[1]];
            let gd = mix(g);
            let vn = [v[0] + gd[0] + gn[0] - grad[0], v[1] + gd[1] + gn[1] - grad[1]];
            x = xn;
            h = hn;
            v = vn;
            g = vn;
            grad = gn;

            state = beer_step(state, &env, &hp).unwrap();
            for i in 0..2 {
                assert!((state.x[(0, i)] - x[i]).abs() < 1e-15);
                assert!((state.v[(0, i)] - v[i]).abs() < 1e-15);
                assert!((state.h[(0, i)] - h[i]).abs() < 1e-15);
                assert!((state.g[(0, i)] - g[i]).abs() < 1e-15);
            }
        }
        // the first step moves both clients to 0.1 * (0 + 2) = 0.2 for client 1
        let s1 = beer_step(beer_init(&Vector::from_vec(vec![0.0]), &env, &hp).unwrap(), &env, &hp).unwrap();
        assert_eq!(s1.x.as_slice(), &[0.0, 0.2]);
    }

    #[test]
    fn identity_compression_surrogates_exact() {
        let g = build_graph(GraphKind::Ring, 5, None, 0).unwrap();
        let mixing = metropolis_weights(&g).unwrap();
        let inst = crate::data::synth_quadratic(5, 4, 1, 5.0).unwrap();
        let env = Env {
            mixing: &mixing,
            objective: &inst.objective,
            shards: &inst.shards,
            compressor: &Compressor::Identity,
            rng: RngStream::new(3),
            parallel: false,
        };
        let hp = HyperParams { eta: 0.01, gamma: 0.5, batch: Batch::Full };
        let mut s = beer_init(&Vector::zeros(4), &env, &hp).unwrap();
        for _ in 0..10 {
            s = beer_step(s, &env, &hp).unwrap();
            assert_eq!(s.h, s.x);
            assert_eq!(s.g, s.v);
        }
    }

    #[test]
    fn tracking_identity_and_mean_dynamics() {
        let g = build_graph(GraphKind::Ring, 6, None, 0).unwrap();
        let mixing = metropolis_weights(&g).unwrap();
        let inst = crate::data::synth_quadratic(6, 8, 2, 10.0).unwrap();
        for comp in ["gsgd:3", "topk:2", "randk:3"] {
            let comp: Compressor = comp.parse().unwrap();
            let env = Env {
                mixing: &mixing,
                objective: &inst.objective,
                shards: &inst.shards,
                compressor: &comp,
                rng: RngStream::new(11),
                parallel: false,
            };
            let hp = HyperParams { eta: 0.005, gamma: 0.3, batch: Batch::Size(1) };
            let mut s = beer_init(&Vector::zeros(8), &env, &hp).unwrap();
            for _ in 0..50 {
                let xbar = column_mean(&s.x);
                let vbar = column_mean(&s.v);
                s = beer_step(s, &env, &hp).unwrap();
                let gap = column_mean(&s.v).sub(&column_mean(&s.cached_grad)).norm();
                assert!(gap <= 1e-10 * (1.0 + frobenius_sq(&s.v).sqrt()), "{comp}: {gap}");
                let mut expect = xbar.clone();
                expect.axpy(-hp.eta, &vbar);
                assert!(column_mean(&s.x).sub(&expect).norm() <= 1e-10);
            }
        }
    }

    #[test]
    fn single_node_is_gradient_descent() {
        let inst = crate::data::synth_quadratic(1, 3, 5, 4.0).unwrap();
        let mixing = MixingMatrix::single_node();
        let env = Env {
            mixing: &mixing,
            objective: &inst.objective,
            shards: &inst.shards,
            compressor: &Compressor::Identity,
            rng: RngStream::new(0),
            parallel: false,
        };
        let hp = HyperParams { eta: 0.1, gamma: 1.0, batch: Batch::Full };
        let x0 = Vector::from_vec(vec![1.0, -1.0, 0.5]);
        let mut gd = x0.clone();
        let mut states = [
            beer_init(&x0, &env, &hp).unwrap(),
            beer_init(&x0, &env, &hp).unwrap(),
            beer_init(&x0, &env, &hp).unwrap(),
            beer_init(&x0, &env, &hp).unwrap(),
        ];
        let algos = [Algorithm::Beer, Algorithm::Choco, Algorithm::Dsgd, Algorithm::D2];
        for _ in 0..100 {
            let grad = inst.objective.full_gradient(&inst.shards[0], &gd).unwrap();
            gd.axpy(-hp.eta, &grad);
            for (s, a) in states.iter_mut().zip(algos) {
                *s = step(a, s.clone(), &env, &hp).unwrap();
                let got = s.x.column(0);
                assert!(got.sub(&gd).norm() <= 1e-12 * (1.0 + gd.norm()), "{a}");
            }
        }
    }

    #[test]
    fn choco_breaks_tracking_identity_in_v() {
        let g = build_graph(GraphKind::Ring, 4, None, 0).unwrap();
        let mixing = metropolis_weights(&g).unwrap();
        let inst = crate::data::synth_quadratic(4, 5, 8, 10.0).unwrap();
        let comp: Compressor = "topk:2".parse().unwrap();
        let env = Env {
            mixing: &mixing,
            objective: &inst.objective,
            shards: &inst.shards,
            compressor: &comp,
            rng: RngStream::new(1),
            parallel: false,
        };
        let hp = HyperParams { eta: 0.01, gamma: 0.4, batch: Batch::Full };
        let mut beer = beer_init(&Vector::zeros(5), &env, &hp).unwrap();
        let mut choco = beer.clone();
        for _ in 0..20 {
            beer = beer_step(beer, &env, &hp).unwrap();
            choco = choco_step(choco, &env, &hp).unwrap();
        }
        // mean of V equals mean of the full local gradients at X for both by
        // construction; what differs is whether V tracks the *global*
        // gradient at every client
        let spread = |s: &AlgoState| frobenius_sq(&crate::linalg::consensus_residual(&s.v));
        assert!(spread(&beer) < spread(&choco));
    }

    #[test]
    fn dsgd_with_uniform_mixing_is_centralized_gd() {
        let inst = crate::data::synth_quadratic(4, 3, 6, 3.0).unwrap();
        let mixing = MixingMatrix::new(Matrix::filled(4, 4, 0.25)).unwrap();
        let env = Env {
            mixing: &mixing,
            objective: &inst.objective,
            shards: &inst.shards,
            compressor: &Compressor::Identity,
            rng: RngStream::new(0),
            parallel: false,
        };
        let hp = HyperParams { eta: 0.05, gamma: 1.0, batch: Batch::Full };
        let mut s = beer_init(&Vector::zeros(3), &env, &hp).unwrap();
        let mut xbar = Vector::zeros(3);
        for _ in 0..30 {
            let grad = inst.objective.global_gradient(&inst.shards, &xbar).unwrap();
            xbar.axpy(-hp.eta, &grad);
            s = dsgd_step(s, &env, &hp).unwrap();
            assert!(column_mean(&s.x).sub(&xbar).norm() < 1e-12);
        }
    }

    #[test]
    fn d2_removes_dsgd_bias_and_matches_on_identical_shards() {
        // D² needs the smallest eigenvalue of W above -1/3, so ring 5
        let g = build_graph(GraphKind::Ring, 5, None, 0).unwrap();
        let mixing = metropolis_weights(&g).unwrap();
        let inst = crate::data::synth_quadratic(5, 3, 2, 3.0).unwrap();
        let env = Env {
            mixing: &mixing,
            objective: &inst.objective,
            shards: &inst.shards,
            compressor: &Compressor::Identity,
            rng: RngStream::new(0),
            parallel: false,
        };
        let hp = HyperParams { eta: 0.02, gamma: 1.0, batch: Batch::Full };
        let mut dsgd = beer_init(&Vector::zeros(3), &env, &hp).unwrap();
        let mut d2 = dsgd.clone();
        for _ in 0..3000 {
            dsgd = dsgd_step(dsgd, &env, &hp).unwrap();
            d2 = d2_step(d2, &env, &hp).unwrap();
        }
        let cons = |s: &AlgoState| frobenius_sq(&crate::linalg::consensus_residual(&s.x));
        assert!(cons(&dsgd) > 1e-6, "DSGD plateau {}", cons(&dsgd));
        assert!(cons(&d2) < 1e-12, "D2 residual {}", cons(&d2));

        let same: Vec<Shard> = (0..5)
            .map(|i| Shard { owner: i, ..inst.shards[0].clone() })
            .collect();
        let env = Env { shards: &same, ..env };
        let x0 = Vector::from_vec(vec![0.3, -0.2, 1.0]);
        let mut a = beer_init(&x0, &env, &hp).unwrap();
        let mut b = a.clone();
        for _ in 0..200 {
            a = dsgd_step(a, &env, &hp).unwrap();
            b = d2_step(b, &env, &hp).unwrap();
            assert!(a.x.sub(&b.x).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn serial_and_parallel_agree() {
        let g = build_graph(GraphKind::ErdosRenyi, 7, Some(0.5), 4).unwrap();
        let mixing = metropolis_weights(&g).unwrap();
        let inst = crate::data::synth_quadratic(7, 6, 3, 10.0).unwrap();
        let comp: Compressor = "gsgd:4".parse().unwrap();
        let mk = |parallel| Env {
            mixing: &mixing,
            objective: &inst.objective,
            shards: &inst.shards,
            compressor: &comp,
            rng: RngStream::new(21),
            parallel,
        };
        let hp = HyperParams { eta: 0.01, gamma: 0.5, batch: Batch::Size(2) };
        let (e1, e2) = (mk(false), mk(true));
        let mut a = beer_init(&Vector::zeros(6), &e1, &hp).unwrap();
        let mut b = beer_init(&Vector::zeros(6), &e2, &hp).unwrap();
        for _ in 0..20 {
            a = beer_step(a, &e1, &hp).unwrap();
            b = beer_step(b, &e2, &hp).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_reports_round() {
        let inst = crate::data::synth_quadratic(1, 2, 0, 10.0).unwrap();
        let mixing = MixingMatrix::single_node();
        let env = Env {
            mixing: &mixing,
            objective: &inst.objective,
            shards: &inst.shards,
            compressor: &Compressor::Identity,
            rng: RngStream::new(0),
            parallel: false,
        };
        let hp = HyperParams { eta: 1.0, gamma: 1.0, batch: Batch::Full };
        let mut s = beer_init(&Vector::zeros(2), &env, &hp).unwrap();
        let err = loop {
            match beer_step(s, &env, &hp) {
                Ok(next) => s = next,
                Err(e) => break e,
            }
        };
        assert!(matches!(err, Error::Diverged { round, .. } if round > 1));
    }

    #[test]
    fn stepsize_formulas() {
        let hp = theoretical_stepsizes(1.0, 1.0, 1.0, 1.0, None, None).unwrap();
        assert!((hp.gamma - 1.0 / 6.0).abs() < 1e-15);
        assert!((hp.eta - 1.0 / 54.0).abs() < 1e-15);

        let half = theoretical_stepsizes(0.5, 1.0, 1.0, 1.0, None, None).unwrap();
        assert!((half.gamma - hp.gamma / 2.0).abs() < 1e-15);
        assert!((half.eta - hp.eta / 2.0).abs() < 1e-15);

        assert!(theoretical_stepsizes(1.0, 1.0, 1.0, 0.0, None, None).is_err());
        let clamped = theoretical_stepsizes(1.0, 1.0, 0.0, 1.0, None, None).unwrap();
        assert_eq!(clamped.gamma, 1.0);

        for (alpha, rho, c, l) in [(1.0, 1.0, 1.0, 1.0), (0.3, 0.2, 4.0, 7.0), (0.675, 0.05, 16.0 / 9.0, 2.0)] {
            let hp = theoretical_stepsizes(alpha, rho, c, l, None, None).unwrap();
            let (g, e) = (hp.gamma, hp.eta);
            assert!(1.0 - alpha / 2.0 + 6.0 * g * g * c / alpha <= 1.0 - alpha / 4.0 + 1e-15);
            assert!(1.0 - g * rho / 2.0 + 18.0 * l * l * e * e / (g * rho) <= 1.0 - g * rho / 4.0 + 1e-15);
        }
    }

    #[test]
    fn reduced_system_cases() {
        let tiny = verify_rate_constants([1.0, 0.5, 200.0, 1.0], 0.0, 1e-12, 4.0, None);
        assert!(tiny.feasible, "{:?}", tiny.slacks);

        let big = verify_rate_constants([1.0, 1.0, 1.0, 1.0], 1.0, 0.01, 4.0, None);
        assert!(big.slacks[0] < 0.0 && !big.feasible);

        // the default step-size constants admit no solution
        assert!(minimal_rate_constants(1.0 / 12.0, 1.0 / 9.0, 1.0, None)
            .is_none_or(|c| !verify_rate_constants(c, 1.0 / 12.0, 1.0 / 9.0, 1.0, None).feasible));
    }

    #[test]
    fn search_finds_feasible_constants() {
        for c in [1.0, 16.0 / 9.0, 4.0] {
            let found = search_rate_constants(c, None, 12).expect("feasible");
            let check = verify_rate_constants(found.c, found.c_gamma, found.c_eta, c, None);
            assert!(check.feasible, "{:?}", check.slacks);
            assert!(found.c.iter().all(|&v| (0.0..=10.0).contains(&v)));
        }
        for kappa in [1.0, 10.0, 100.0] {
            let found = search_rate_constants(4.0, Some(kappa), 12).expect("PL feasible");
            assert!(verify_rate_constants(found.c, found.c_gamma, found.c_eta, 4.0, Some(kappa)).feasible);
        }
    }

    #[test]
    fn minimal_constants_are_least_solution() {
        let (cg, ce, c) = (1.0 / 128.0, 1.0 / 128.0, 4.0);
        let least = minimal_rate_constants(cg, ce, c, None).unwrap();
        let check = verify_rate_constants(least, cg, ce, c, None);
        assert!(check.slacks[..4].iter().all(|&s| s >= 0.0));
        // shrinking any coordinate breaks one of the first four rows
        for i in 0..4 {
            if least[i] == 0.0 {
                continue;
            }
            let mut smaller = least;
            smaller[i] *= 0.99;
            let s = verify_rate_constants(smaller, cg, ce, c, None);
            assert!(s.slacks[..4].iter().any(|&v| v < 0.0), "coordinate {i}");
        }
    }
}
