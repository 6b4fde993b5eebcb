//! Contractive compression operators.
//!
//! An operator `C` is an alpha-compressor when
//! `E ||C(x) - x||^2 <= (1 - alpha) ||x||^2`. Matrices are compressed column
//! by column, each column drawing from its own random substream.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::RngStream;

/// Bits used for one real-valued payload entry.
pub const FLOAT_BITS: u64 = 32;

/// Unbiased operators that can be turned into contractions by
/// [`Compressor::Scaled`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Unbiased {
    /// Keeps `k` uniformly chosen coordinates scaled by `d/k`.
    /// Variance parameter `omega = d/k - 1`.
    RandK { k: usize },
}

impl Unbiased {
    pub fn omega(&self, d: usize) -> f64 {
        match *self {
            Unbiased::RandK { k } => d as f64 / k as f64 - 1.0,
        }
    }

    fn apply(&self, x: &[f64], rng: &RngStream) -> Result<Vec<f64>> {
        match *self {
            Unbiased::RandK { k } => {
                let d = x.len();
                check_k(k, d)?;
                let scale = d as f64 / k as f64;
                Ok(random_k(x, k, rng).into_iter().map(|v| v * scale).collect())
            }
        }
    }

    fn message_bits(&self, d: usize) -> u64 {
        match *self {
            Unbiased::RandK { k } => sparse_bits(k, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Compressor {
    Identity,
    /// Random dithering with `b` bits per coordinate (one sign bit), rescaled
    /// by `1/tau` so that it contracts.
    Gsgd { b: u32 },
    /// Keeps the `k` largest magnitudes; ties go to the lower index.
    TopK { k: usize },
    /// Keeps `k` uniformly chosen coordinates, unscaled. This is the
    /// bias-corrected form of unbiased rand-k.
    RandK { k: usize },
    /// `inner(x) / (1 + omega)` for an unbiased `inner` with variance
    /// parameter `omega`.
    Scaled { omega: f64, inner: Unbiased },
}

fn check_k(k: usize, d: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > d {
        return Err(Error::invalid(format!("k = {k} exceeds dimension d = {d}")));
    }
    Ok(())
}

fn ceil_log2(d: usize) -> u64 {
    if d <= 1 {
        0
    } else {
        (usize::BITS - (d - 1).leading_zeros()) as u64
    }
}

fn sparse_bits(k: usize, d: usize) -> u64 {
    k as u64 * (ceil_log2(d) + FLOAT_BITS)
}

/// `tau = 1 + min(d / 4^(b-1), sqrt(d) / 2^(b-1))`.
pub fn gsgd_tau(b: u32, d: usize) -> f64 {
    let levels = 2f64.powi(b as i32 - 1);
    let d = d as f64;
    1.0 + (d / (levels * levels)).min(d.sqrt() / levels)
}

/// Multiplier `1/(1+omega)` that turns an unbiased operator with variance
/// `omega` into a `1/(1+omega)`-compressor.
pub fn bias_correct(omega: f64) -> Result<f64> {
    if !omega.is_finite() || omega < 0.0 {
        return Err(Error::invalid(format!("omega must be >= 0, got {omega}")));
    }
    Ok(1.0 / (1.0 + omega))
}

fn random_k(x: &[f64], k: usize, stream: &RngStream) -> Vec<f64> {
    let mut rng = stream.rng();
    let mut out = vec![0.0; x.len()];
    for i in index::sample(&mut rng, x.len(), k) {
        out[i] = x[i];
    }
    out
}

fn top_k(x: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    let by_magnitude = |&a: &usize, &b: &usize| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b));
    if k < x.len() {
        order.select_nth_unstable_by(k, by_magnitude);
    }
    let mut out = vec![0.0; x.len()];
    for &i in &order[..k] {
        out[i] = x[i];
    }
    out
}

fn gsgd(x: &[f64], b: u32, stream: &RngStream) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; x.len()];
    }
    let levels = 2f64.powi(b as i32 - 1);
    let tau = gsgd_tau(b, x.len());
    let mut rng = stream.rng();
    x.iter()
        .map(|&xi| {
            let u: f64 = rng.random();
            let q = (levels * xi.abs() / norm + u).floor();
            (norm / tau) * xi.signum() * q / levels
        })
        .map(|v| if v == 0.0 { 0.0 } else { v })
        .collect()
}

impl Compressor {
    /// Checks kind parameters that do not depend on the dimension.
    pub fn validate(&self) -> Result<()> {
        match self {
            Compressor::Identity => Ok(()),
            Compressor::Gsgd { b } if *b >= 2 => Ok(()),
            Compressor::Gsgd { b } => Err(Error::invalid(format!("gsgd needs b >= 2, got {b}"))),
            Compressor::TopK { k } | Compressor::RandK { k } if *k >= 1 => Ok(()),
            Compressor::TopK { .. } | Compressor::RandK { .. } => {
                Err(Error::invalid("k must be positive"))
            }
            Compressor::Scaled { omega, inner } => {
                bias_correct(*omega)?;
                match inner {
                    Unbiased::RandK { k } if *k >= 1 => Ok(()),
                    Unbiased::RandK { .. } => Err(Error::invalid("k must be positive")),
                }
            }
        }
    }

    /// Compresses one vector.
    pub fn compress(&self, x: &Vector, rng: &RngStream) -> Result<Vector> {
        Ok(Vector::from_vec(self.compress_slice(x, rng)?))
    }

    pub(crate) fn compress_slice(&self, x: &[f64], rng: &RngStream) -> Result<Vec<f64>> {
        self.validate()?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("compress input"));
        }
        let d = x.len();
        Ok(match self {
            Compressor::Identity => x.to_vec(),
            Compressor::Gsgd { b } => gsgd(x, *b, rng),
            Compressor::TopK { k } => {
                check_k(*k, d)?;
                top_k(x, *k)
            }
            Compressor::RandK { k } => {
                check_k(*k, d)?;
                random_k(x, *k, rng)
            }
            Compressor::Scaled { omega, inner } => {
                let factor = bias_correct(*omega)?;
                inner.apply(x, rng)?.into_iter().map(|v| v * factor).collect()
            }
        })
    }

    /// Column-wise compression; column `j` uses `rng.derive(j)`.
    pub fn compress_matrix(&self, m: &Matrix, rng: &RngStream) -> Result<Matrix> {
        if matches!(self, Compressor::Identity) {
            if !m.is_finite() {
                return Err(Error::NonFinite("compress input"));
            }
            return Ok(m.clone());
        }
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for j in 0..m.cols() {
            let col = self.compress_slice(&m.column(j), &rng.derive(j as u64))?;
            out.set_column(j, &col);
        }
        Ok(out)
    }

    /// Contraction parameter for dimension `d`.
    pub fn alpha_of(&self, d: usize) -> f64 {
        match self {
            Compressor::Identity => 1.0,
            Compressor::Gsgd { b } => 1.0 / gsgd_tau(*b, d),
            Compressor::TopK { k } | Compressor::RandK { k } => (*k as f64 / d as f64).min(1.0),
            Compressor::Scaled { omega, .. } => 1.0 / (1.0 + omega),
        }
    }

    /// Payload size of one compressed `d`-vector.
    pub fn message_bits(&self, d: usize) -> u64 {
        match self {
            Compressor::Identity => FLOAT_BITS * d as u64,
            Compressor::Gsgd { b } => FLOAT_BITS + d as u64 * *b as u64,
            Compressor::TopK { k } | Compressor::RandK { k } => sparse_bits(*k, d),
            Compressor::Scaled { inner, .. } => inner.message_bits(d),
        }
    }

    /// Whether the contraction holds for every draw, not only in expectation.
    pub fn is_deterministic(&self) -> bool {
        matches!(self, Compressor::Identity | Compressor::TopK { .. })
    }
}

/// Bits of one uncompressed `d`-vector.
pub fn dense_bits(d: usize) -> u64 {
    FLOAT_BITS * d as u64
}

impl FromStr for Compressor {
    type Err = Error;

    /// Accepts `identity`, `gsgd:B`, `topk:K`, `randk:K`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let int_arg = |what: &str| -> Result<u64> {
            let a = arg.ok_or_else(|| Error::invalid(format!("{what} needs a parameter, e.g. {what}:5")))?;
            a.parse::<u64>()
                .map_err(|_| Error::invalid(format!("bad {what} parameter {a:?}")))
        };
        let c = match kind {
            "identity" | "none" if arg.is_none() => Compressor::Identity,
            "gsgd" => Compressor::Gsgd {
                b: u32::try_from(int_arg("gsgd")?).map_err(|_| Error::invalid("gsgd b too large"))?,
            },
            "topk" => Compressor::TopK {
                k: int_arg("topk")? as usize,
            },
            "randk" => Compressor::RandK {
                k: int_arg("randk")? as usize,
            },
            _ => return Err(Error::invalid(format!("unknown compressor {s:?}"))),
        };
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for Compressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Compressor::Identity => write!(f, "identity"),
            Compressor::Gsgd { b } => write!(f, "gsgd:{b}"),
            Compressor::TopK { k } => write!(f, "topk:{k}"),
            Compressor::RandK { k } => write!(f, "randk:{k}"),
            Compressor::Scaled { omega, inner: Unbiased::RandK { k } } => {
                write!(f, "scaled({omega}, urandk:{k})")
            }
        }
    }
}
