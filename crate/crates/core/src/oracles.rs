//! Local objectives and their (stochastic) gradient oracles.
//!
//! Two families are supported:
//!
//! * `LogRegNcvx`: logistic loss `log(1 + exp(-b a.x))` averaged over the
//!   shard, plus the nonconvex regularizer `reg * sum_j x_j^2 / (1 + x_j^2)`
//!   added once per local objective.
//! * `Quadratic`: `f_i(x) = 1/2 ||A_i x - b_i||^2` with the rows of `A_i` as
//!   samples. A single sample `r` contributes `m/2 (a_r.x - b_r)^2`, so
//!   minibatch gradients stay unbiased.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, symmetric_eigenvalues, Matrix, Vector};
use crate::rng::RngStream;

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub features: Matrix,
    /// `+-1` for logistic data, real targets for quadratics.
    pub labels: Vec<f64>,
    pub owner: usize,
}

impl Shard {
    pub fn new(features: Matrix, labels: Vec<f64>, owner: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::invalid("shard must hold at least one sample"));
        }
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                op: "shard",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        Ok(Shard {
            features,
            labels,
            owner,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    LogRegNcvx { reg: f64, d: usize },
    Quadratic { d: usize },
}

/// Minibatch size, or the whole shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Batch {
    Full,
    Size(usize),
}

/// The samples a stochastic gradient was evaluated on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleSet {
    All,
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessInfo {
    pub l: f64,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
}

const L_FLOOR: f64 = 1e-12;

fn softplus(z: f64) -> f64 {
    // log(1 + e^z) without overflow
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Objective {
    pub fn dim(&self) -> usize {
        match *self {
            Objective::LogRegNcvx { d, .. } | Objective::Quadratic { d } => d,
        }
    }

    pub fn is_logistic(&self) -> bool {
        matches!(self, Objective::LogRegNcvx { .. })
    }

    fn check(&self, shard: &Shard, x: &[f64]) -> Result<()> {
        let d = self.dim();
        if x.len() != d || shard.dim() != d {
            return Err(Error::DimensionMismatch {
                op: "objective",
                left: (d, shard.dim()),
                right: (x.len(), 1),
            });
        }
        Ok(())
    }

    fn sample_loss(&self, shard: &Shard, r: usize, x: &[f64]) -> f64 {
        let a = shard.features.row(r);
        let y = shard.labels[r];
        match self {
            Objective::LogRegNcvx { .. } => softplus(-y * dot(a, x)),
            Objective::Quadratic { .. } => {
                let resid = dot(a, x) - y;
                0.5 * shard.len() as f64 * resid * resid
            }
        }
    }

    /// Adds `weight * grad f(x; sample r)` (without regularizer) into `out`.
    fn add_sample_grad(&self, shard: &Shard, r: usize, x: &[f64], weight: f64, out: &mut [f64]) {
        let a = shard.features.row(r);
        let y = shard.labels[r];
        let coef = match self {
            Objective::LogRegNcvx { .. } => -y * sigmoid(-y * dot(a, x)),
            Objective::Quadratic { .. } => shard.len() as f64 * (dot(a, x) - y),
        } * weight;
        if coef != 0.0 {
            for (o, &aj) in out.iter_mut().zip(a) {
                *o += coef * aj;
            }
        }
    }

    fn regularizer(&self, x: &[f64]) -> f64 {
        match *self {
            Objective::LogRegNcvx { reg, .. } => {
                reg * x.iter().map(|v| v * v / (1.0 + v * v)).sum::<f64>()
            }
            Objective::Quadratic { .. } => 0.0,
        }
    }

    fn add_regularizer_grad(&self, x: &[f64], out: &mut [f64]) {
        if let Objective::LogRegNcvx { reg, .. } = *self {
            for (o, &v) in out.iter_mut().zip(x) {
                let q = 1.0 + v * v;
                *o += 2.0 * reg * v / (q * q);
            }
        }
    }

    /// Local objective value `f_i(x)`.
    pub fn value(&self, shard: &Shard, x: &[f64]) -> Result<f64> {
        self.check(shard, x)?;
        let m = shard.len();
        let loss = (0..m).map(|r| self.sample_loss(shard, r, x)).sum::<f64>() / m as f64;
        Ok(loss + self.regularizer(x))
    }

    pub fn full_gradient(&self, shard: &Shard, x: &[f64]) -> Result<Vector> {
        self.gradient_at_same_batch(shard, x, &SampleSet::All)
    }

    /// Gradient over `batch` indices drawn i.i.d. with replacement, together
    /// with the drawn sample set so the same batch can be re-evaluated.
    pub fn minibatch_gradient(
        &self,
        shard: &Shard,
        x: &[f64],
        batch: Batch,
        rng: &RngStream,
    ) -> Result<(Vector, SampleSet)> {
        let samples = match batch {
            Batch::Full => SampleSet::All,
            Batch::Size(0) => return Err(Error::invalid("batch size must be >= 1")),
            Batch::Size(b) => {
                let mut g = rng.rng();
                let m = shard.len();
                SampleSet::Indices((0..b).map(|_| g.random_range(0..m)).collect())
            }
        };
        let grad = self.gradient_at_same_batch(shard, x, &samples)?;
        Ok((grad, samples))
    }

    /// Minibatch gradient at `x` over exactly `samples`.
    pub fn gradient_at_same_batch(&self, shard: &Shard, x: &[f64], samples: &SampleSet) -> Result<Vector> {
        self.check(shard, x)?;
        let mut g = vec![0.0; self.dim()];
        match samples {
            SampleSet::All => {
                let w = 1.0 / shard.len() as f64;
                for r in 0..shard.len() {
                    self.add_sample_grad(shard, r, x, w, &mut g);
                }
            }
            SampleSet::Indices(idx) => {
                if idx.is_empty() {
                    return Err(Error::invalid("empty sample set"));
                }
                if let Some(&bad) = idx.iter().find(|&&r| r >= shard.len()) {
                    return Err(Error::invalid(format!(
                        "sample index {bad} out of range for shard of {}",
                        shard.len()
                    )));
                }
                let w = 1.0 / idx.len() as f64;
                for &r in idx {
                    self.add_sample_grad(shard, r, x, w, &mut g);
                }
            }
        }
        self.add_regularizer_grad(x, &mut g);
        Ok(Vector::from_vec(g))
    }

    /// Global objective `(1/n) sum_i f_i(x)`.
    pub fn global_value(&self, shards: &[Shard], x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for s in shards {
            total += self.value(s, x)?;
        }
        Ok(total / shards.len() as f64)
    }

    /// `(1/n) sum_i grad f_i(x)`.
    pub fn global_gradient(&self, shards: &[Shard], x: &[f64]) -> Result<Vector> {
        let mut g = Vector::zeros(self.dim());
        for s in shards {
            g.axpy(1.0, &self.full_gradient(s, x)?);
        }
        Ok(g.scaled(1.0 / shards.len() as f64))
    }

    /// Smoothness constant (and strong convexity for quadratics).
    ///
    /// Logistic: `max_i lambda_max(A_i^T A_i) / (4 m_i) + 2 reg`.
    /// Quadratic: `L = max_i lambda_max(A_i^T A_i)`, `mu` the smallest
    /// eigenvalue of the averaged Hessian.
    pub fn smoothness_estimate(&self, shards: &[Shard]) -> Result<SmoothnessInfo> {
        let d = self.dim();
        let mut l_max = 0.0f64;
        let mut avg_hessian = Matrix::zeros(d, d);
        for s in shards {
            let gram = matmul(&s.features.transpose(), &s.features)?;
            let top = symmetric_eigenvalues(&gram)?.first().copied().unwrap_or(0.0);
            match *self {
                Objective::LogRegNcvx { .. } => l_max = l_max.max(top / (4.0 * s.len() as f64)),
                Objective::Quadratic { .. } => {
                    l_max = l_max.max(top);
                    avg_hessian.axpy(1.0 / shards.len() as f64, &gram)?;
                }
            }
        }
        Ok(match *self {
            Objective::LogRegNcvx { reg, .. } => SmoothnessInfo {
                l: (l_max + 2.0 * reg).max(L_FLOOR),
                mu: None,
                sigma: None,
            },
            Objective::Quadratic { .. } => {
                let mu = symmetric_eigenvalues(&avg_hessian)?.last().copied().unwrap_or(0.0);
                SmoothnessInfo {
                    l: l_max.max(L_FLOOR),
                    mu: (mu > 0.0).then_some(mu),
                    sigma: None,
                }
            }
        })
    }

    /// `max_i E ||grad f(x; xi) - grad f_i(x)||^2` for single samples.
    pub fn variance_at(&self, shards: &[Shard], x: &[f64]) -> Result<f64> {
        let mut worst = 0.0f64;
        for s in shards {
            let full = self.full_gradient(s, x)?;
            let mut acc = 0.0;
            for r in 0..s.len() {
                let g = self.gradient_at_same_batch(s, x, &SampleSet::Indices(vec![r]))?;
                acc += g.sub(&full).norm_sq();
            }
            worst = worst.max(acc / s.len() as f64);
        }
        Ok(worst)
    }

    /// Fraction of samples with `sign(a.x) == label`, counting `sign(0)` as +1.
    pub fn accuracy(&self, shards: &[Shard], x: &[f64]) -> Result<f64> {
        if !self.is_logistic() {
            return Err(Error::invalid("accuracy is only defined for logistic objectives"));
        }
        let mut hits = 0usize;
        let mut total = 0usize;
        for s in shards {
            self.check(s, x)?;
            for r in 0..s.len() {
                let pred = if dot(s.features.row(r), x) >= 0.0 { 1.0 } else { -1.0 };
                hits += (pred == s.labels[r]) as usize;
                total += 1;
            }
        }
        Ok(hits as f64 / total.max(1) as f64)
    }

    /// Long-run full-gradient descent from `x0` with step `1/L`; returns the
    /// final point and value. Used as `f*` where no closed form exists.
    pub fn reference_minimum(
        &self,
        shards: &[Shard],
        x0: &[f64],
        l: f64,
        tol: f64,
        max_iter: usize,
    ) -> Result<(Vector, f64)> {
        let mut x = Vector::from_vec(x0.to_vec());
        for _ in 0..max_iter {
            let g = self.global_gradient(shards, &x)?;
            if g.norm() <= tol {
                break;
            }
            x.axpy(-1.0 / l, &g);
        }
        let f = self.global_value(shards, &x)?;
        Ok((x, f))
    }
}
