//! Per-round theory quantities and the metrics CSV.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::algorithms::{lyapunov_weights, AlgoState};
use crate::error::Result;
use crate::linalg::{column_mean, consensus_residual, frobenius_sq, Matrix};
use crate::oracles::{Objective, Shard};

/// Compression errors (1, 2), consensus errors (3, 4) and the squared norm
/// of the mean tracker (5).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OmegaVector {
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub omega4: f64,
    pub omega5: f64,
}

impl OmegaVector {
    pub fn first_four(&self) -> [f64; 4] {
        [self.omega1, self.omega2, self.omega3, self.omega4]
    }

    pub fn scaled(&self, s: f64) -> OmegaVector {
        OmegaVector {
            omega1: s * self.omega1,
            omega2: s * self.omega2,
            omega3: s * self.omega3,
            omega4: s * self.omega4,
            omega5: s * self.omega5,
        }
    }
}

fn diff_sq(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

pub fn omegas(s: &AlgoState) -> OmegaVector {
    OmegaVector {
        omega1: diff_sq(&s.h, &s.x),
        omega2: diff_sq(&s.g, &s.v),
        omega3: frobenius_sq(&consensus_residual(&s.x)),
        omega4: frobenius_sq(&consensus_residual(&s.v)),
        omega5: column_mean(&s.v).norm_sq(),
    }
}

/// `||grad f(xbar)||^2` at the average iterate.
pub fn grad_norm_at_mean(s: &AlgoState, obj: &Objective, shards: &[Shard]) -> Result<f64> {
    Ok(obj.global_gradient(shards, &column_mean(&s.x))?.norm_sq())
}

/// Weights of the Lyapunov function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSpec {
    pub consts: [f64; 4],
    /// Power of `rho` in the weight of the fourth error term.
    pub exponent: i32,
    pub rho: f64,
    pub l: f64,
    pub fstar: f64,
}

/// `f(xbar) - f* + s . (omega1..omega4)`.
pub fn lyapunov(s: &AlgoState, spec: &LyapunovSpec, obj: &Objective, shards: &[Shard]) -> Result<f64> {
    let gap = obj.global_value(shards, &column_mean(&s.x))? - spec.fstar;
    Ok(lyapunov_from(gap, &omegas(s), spec, s.n()))
}

/// Same as [`lyapunov`] with the suboptimality gap and errors precomputed.
pub fn lyapunov_from(gap: f64, om: &OmegaVector, spec: &LyapunovSpec, n: usize) -> f64 {
    let w = lyapunov_weights(spec.consts, spec.rho, spec.l, n, spec.exponent);
    gap + w.iter().zip(om.first_four()).map(|(a, b)| a * b).sum::<f64>()
}

/// Transition matrix `A` and the coefficient vectors `b1` (of omega5) and
/// `b2` (of `sigma^2/b`) of the one-round error recursions.
pub fn recursion_system(
    alpha: f64,
    gamma: f64,
    eta: f64,
    rho: f64,
    c: f64,
    l: f64,
    n: usize,
) -> ([[f64; 4]; 4], [f64; 4], [f64; 4]) {
    let n = n as f64;
    let (g2, e2, l2) = (gamma * gamma, eta * eta, l * l);
    let gr = gamma * rho;
    let comp_diag = 1.0 - alpha / 2.0 + 6.0 * g2 * c / alpha;
    let a = [
        [comp_diag, 0.0, 6.0 * g2 * c / alpha, 6.0 * e2 / alpha],
        [
            18.0 * g2 * c * l2 / alpha,
            comp_diag,
            18.0 * g2 * c * l2 / alpha,
            (6.0 * g2 * c + 18.0 * l2 * e2) / alpha,
        ],
        [6.0 * gamma * c / rho, 0.0, 1.0 - gr / 2.0, 6.0 * e2 / gr],
        [
            18.0 * gamma * c * l2 / rho,
            6.0 * gamma * c / rho,
            18.0 * gamma * c * l2 / rho,
            1.0 - gr / 2.0 + 18.0 * l2 * e2 / gr,
        ],
    ];
    let b1 = [
        6.0 * n * e2 / alpha,
        18.0 * l2 * e2 * n / alpha,
        0.0,
        18.0 * n * e2 * l2 / gr,
    ];
    let b2 = [0.0, 12.0 * n / alpha, 0.0, 12.0 * n / gr];
    (a, b1, b2)
}

/// Parameters of the error recursions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecursionParams {
    pub alpha: f64,
    pub gamma: f64,
    pub eta: f64,
    pub rho: f64,
    pub c: f64,
    pub l: f64,
    pub n: usize,
    /// `sigma^2 / b`; zero for full gradients.
    pub sigma_sq_over_b: f64,
}

/// `RHS_i(prev) - next_i` for the four one-round error bounds.
pub fn recursion_slacks(prev: &OmegaVector, next: &OmegaVector, p: &RecursionParams) -> [f64; 4] {
    let (a, b1, b2) = recursion_system(p.alpha, p.gamma, p.eta, p.rho, p.c, p.l, p.n);
    let om = prev.first_four();
    let nx = next.first_four();
    let mut out = [0.0; 4];
    for i in 0..4 {
        let rhs: f64 = (0..4).map(|j| a[i][j] * om[j]).sum::<f64>()
            + b1[i] * prev.omega5
            + b2[i] * p.sigma_sq_over_b;
        out[i] = rhs - nx[i];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub cum_bits: u64,
    pub grad_norm_sq: f64,
    pub fval_gap: Option<f64>,
    pub omegas: OmegaVector,
    pub lyapunov: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub wall_ms: f64,
}

pub const CSV_HEADER: &str =
    "round,cum_bits,grad_norm_sq,fval_gap,omega1,omega2,omega3,omega4,omega5,lyapunov,test_accuracy,wall_ms";

/// Shortest decimal that parses back to the same `f64`.
pub fn format_real(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(format_real).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let o = &self.omegas;
        [
            self.round.to_string(),
            self.cum_bits.to_string(),
            format_real(self.grad_norm_sq),
            opt(self.fval_gap),
            format_real(o.omega1),
            format_real(o.omega2),
            format_real(o.omega3),
            format_real(o.omega4),
            format_real(o.omega5),
            opt(self.lyapunov),
            opt(self.test_accuracy),
            format_real(self.wall_ms),
        ]
        .join(",")
    }
}

pub fn write_csv<W: Write>(rows: &[MetricsRow], mut sink: W) -> io::Result<()> {
    writeln!(sink, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(sink, "{}", r.to_csv_line())?;
    }
    sink.flush()
}
