//! Communication graphs and doubly stochastic mixing matrices.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{operator_norm_sq, symmetric_eigenvalues, Matrix};
use crate::rng::{Purpose, RngStream};

const ER_MAX_ATTEMPTS: u64 = 1000;
const STOCHASTIC_TOL: f64 = 1e-12;
const MIN_GAP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Ring,
    Star,
    Grid,
    Complete,
    ErdosRenyi,
}

impl FromStr for GraphKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(GraphKind::Ring),
            "star" => Ok(GraphKind::Star),
            "grid" => Ok(GraphKind::Grid),
            "complete" => Ok(GraphKind::Complete),
            "erdos_renyi" | "er" => Ok(GraphKind::ErdosRenyi),
            other => Err(Error::invalid(format!("unknown graph kind {other:?}"))),
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GraphKind::Ring => "ring",
            GraphKind::Star => "star",
            GraphKind::Grid => "grid",
            GraphKind::Complete => "complete",
            GraphKind::ErdosRenyi => "erdos_renyi",
        };
        f.write_str(s)
    }
}

/// Undirected simple graph on nodes `0..n`, always connected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    /// Normalized as `(i, j)` with `i < j`.
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    /// Validates the edge list and connectivity.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::Graph(format!("self-loop at node {i}")));
            }
            if i >= n || j >= n {
                return Err(Error::Graph(format!("edge ({i},{j}) out of range for n={n}")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        let g = Graph { n, edges: set };
        if !g.is_connected() {
            return Err(Error::Graph("graph is not connected".into()));
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    fn is_connected(&self) -> bool {
        is_connected(self.n, &self.edges)
    }
}

fn is_connected(n: usize, edges: &BTreeSet<(usize, usize)>) -> bool {
    if n == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

/// Builds a connected graph of the requested family.
///
/// `p` is only read for Erdős-Rényi graphs, which are resampled with an
/// incremented seed until connected.
pub fn build_graph(kind: GraphKind, n: usize, p: Option<f64>, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(Error::Graph(format!("need at least 2 nodes, got {n}")));
    }
    let edges: Vec<(usize, usize)> = match kind {
        GraphKind::Ring => {
            if n == 2 {
                vec![(0, 1)]
            } else {
                (0..n).map(|i| (i, (i + 1) % n)).collect()
            }
        }
        GraphKind::Star => (1..n).map(|i| (0, i)).collect(),
        GraphKind::Complete => (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect(),
        GraphKind::Grid => {
            let side = (n as f64).sqrt().round() as usize;
            if side * side != n {
                return Err(Error::Graph(format!("grid requires perfect square, got n={n}")));
            }
            let mut e = Vec::new();
            for r in 0..side {
                for c in 0..side {
                    let u = r * side + c;
                    if c + 1 < side {
                        e.push((u, u + 1));
                    }
                    if r + 1 < side {
                        e.push((u, u + side));
                    }
                }
            }
            e
        }
        GraphKind::ErdosRenyi => {
            let p = p.ok_or_else(|| Error::invalid("erdos_renyi requires p"))?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid(format!("erdos_renyi p must be in (0,1], got {p}")));
            }
            return sample_erdos_renyi(n, p, seed);
        }
    };
    Graph::new(n, edges)
}

fn sample_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Graph> {
    for attempt in 0..ER_MAX_ATTEMPTS {
        let mut rng = RngStream::new(seed.wrapping_add(attempt))
            .for_client(Purpose::Graph, 0, 0)
            .rng();
        let mut edges = BTreeSet::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    edges.insert((i, j));
                }
            }
        }
        if is_connected(n, &edges) {
            return Ok(Graph { n, edges });
        }
    }
    Err(Error::Graph(format!(
        "no connected Erdos-Renyi sample (n={n}, p={p}) after {ER_MAX_ATTEMPTS} attempts"
    )))
}

/// Symmetric doubly stochastic mixing matrix with its spectral constants.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    weights: Matrix,
    rho: f64,
    c: f64,
}

impl MixingMatrix {
    /// Validates `w` (symmetric, doubly stochastic, entries in `[0,1]`) and
    /// computes `rho` and `C`.
    pub fn new(w: Matrix) -> Result<Self> {
        validate_mixing(&w)?;
        let (rho, c) = spectral_constants(&w)?;
        Ok(MixingMatrix { weights: w, rho, c })
    }

    /// As [`MixingMatrix::new`], additionally requiring that `w` is supported
    /// on the edges of `g`.
    pub fn for_graph(g: &Graph, w: Matrix) -> Result<Self> {
        if w.shape() != (g.n(), g.n()) {
            return Err(Error::DimensionMismatch {
                op: "for_graph",
                left: w.shape(),
                right: (g.n(), g.n()),
            });
        }
        for i in 0..g.n() {
            for j in 0..g.n() {
                if i != j && w[(i, j)] != 0.0 && !g.has_edge(i, j) {
                    return Err(Error::invalid(format!("weight on non-edge ({i},{j})")));
                }
            }
        }
        MixingMatrix::new(w)
    }

    /// The `1 x 1` matrix `[1]` for a lone client.
    pub fn single_node() -> Self {
        MixingMatrix {
            weights: Matrix::identity(1),
            rho: 1.0,
            c: 0.0,
        }
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn n(&self) -> usize {
        self.weights.rows()
    }

    /// Spectral gap `1 - |lambda_2(W)|`.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `||W - I||^2`.
    pub fn c(&self) -> f64 {
        self.c
    }

    /// `W - I`, the operator applied to surrogates in every gossip step.
    pub fn laplacian_like(&self) -> Matrix {
        self.weights
            .sub(&Matrix::identity(self.n()))
            .expect("square")
    }

    /// Number of neighbours of each client (nonzero off-diagonal weights).
    pub fn degrees(&self) -> Vec<usize> {
        let n = self.n();
        (0..n)
            .map(|i| (0..n).filter(|&j| j != i && self.weights[(i, j)] != 0.0).count())
            .collect()
    }

    pub fn lazy(&self, gamma: f64) -> Result<MixingMatrix> {
        MixingMatrix::new(lazy_mix(&self.weights, gamma)?)
    }
}

fn validate_mixing(w: &Matrix) -> Result<()> {
    let n = w.rows();
    if w.cols() != n {
        return Err(Error::NotSquare {
            op: "mixing matrix",
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    for i in 0..n {
        let mut row = 0.0;
        let mut col = 0.0;
        for j in 0..n {
            let v = w[(i, j)];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("weight w[{i},{j}] = {v} outside [0,1]")));
            }
            if (v - w[(j, i)]).abs() > STOCHASTIC_TOL {
                return Err(Error::NotSymmetric {
                    asymmetry: (v - w[(j, i)]).abs(),
                });
            }
            row += v;
            col += w[(j, i)];
        }
        if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::invalid(format!("row/column {i} does not sum to 1")));
        }
    }
    Ok(())
}

/// Metropolis-Hastings weights `1 / (1 + max(deg_i, deg_j))` on edges, the
/// remainder on the diagonal.
pub fn metropolis_weights(g: &Graph) -> Result<MixingMatrix> {
    let n = g.n();
    let deg = g.degrees();
    let mut w = Matrix::zeros(n, n);
    for (i, j) in g.edges() {
        let wij = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
        w[(i, j)] = wij;
        w[(j, i)] = wij;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    MixingMatrix::for_graph(g, w)
}

/// `(rho, C)` with `rho = 1 - |lambda_2(W)|` and `C = ||W - I||^2`.
pub fn spectral_constants(w: &Matrix) -> Result<(f64, f64)> {
    let n = w.rows();
    let values = symmetric_eigenvalues(w)?;
    if n == 1 {
        return Ok((1.0, operator_norm_sq(&w.sub(&Matrix::identity(1))?)));
    }
    // drop the Perron eigenvalue 1 (the one closest to 1), keep the rest
    let top = values
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let second = values
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != top)
        .map(|(_, v)| v.abs())
        .fold(0.0f64, f64::max);
    let rho = 1.0 - second;
    if rho <= MIN_GAP {
        return Err(Error::ZeroSpectralGap { rho });
    }
    let c = operator_norm_sq(&w.sub(&Matrix::identity(n))?);
    Ok((rho.min(1.0), c))
}

/// `I + gamma (W - I)`.
pub fn lazy_mix(w: &Matrix, gamma: f64) -> Result<Matrix> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("gamma must be in (0,1], got {gamma}")));
    }
    let n = w.rows();
    let eye = Matrix::identity(n);
    let mut out = eye.clone();
    out.axpy(gamma, &w.sub(&eye)?)?;
    Ok(out)
}
