//! Datasets: LIBSVM parsing, label-sorted partitioning, and synthetic
//! problem generators.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, Vector};
use crate::oracles::{Objective, Shard, SmoothnessInfo};
use crate::rng::{Purpose, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// The first `m` samples (all of them if `m >= len`).
    pub fn head(&self, m: usize) -> Dataset {
        let m = m.min(self.len());
        let d = self.dim();
        Dataset {
            features: Matrix::from_vec(m, d, self.features.as_slice()[..m * d].to_vec())
                .expect("prefix of a valid matrix"),
            labels: self.labels[..m].to_vec(),
        }
    }

    /// Whole dataset as one shard.
    pub fn as_shard(&self, owner: usize) -> Result<Shard> {
        Shard::new(self.features.clone(), self.labels.clone(), owner)
    }
}

fn parse_label(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad label {tok:?}"),
    })?;
    if v == 1.0 {
        Ok(1.0)
    } else if v == -1.0 || v == 0.0 {
        Ok(-1.0)
    } else {
        Err(Error::Parse {
            line,
            msg: format!("label {tok:?} is not one of -1, 0, +1"),
        })
    }
}

/// Reads LIBSVM text (`label idx:val idx:val ...`, 1-based strictly
/// increasing indices). Column `j-1` holds index `j`; the dimension is
/// `max(d_hint, largest index)`. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_libsvm<R: BufRead>(reader: R, d_hint: Option<usize>) -> Result<Dataset> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0usize;

    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let mut toks = line.split_whitespace();
        let Some(label_tok) = toks.next() else {
            continue;
        };
        labels.push(parse_label(label_tok, lineno)?);

        let mut entries = Vec::new();
        let mut prev = 0usize;
        for tok in toks {
            let (idx, val) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("malformed token {tok:?}, expected idx:val"),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad index in {tok:?}"),
            })?;
            if idx < 1 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("index {idx} < 1"),
                });
            }
            if idx <= prev {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("index {idx} not strictly increasing after {prev}"),
                });
            }
            let val: f64 = val.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad value in {tok:?}"),
            })?;
            if !val.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-finite value in {tok:?}"),
                });
            }
            prev = idx;
            entries.push((idx, val));
        }
        max_index = max_index.max(prev);
        rows.push(entries);
    }

    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no samples".into(),
        });
    }
    let d = max_index.max(d_hint.unwrap_or(0));
    let mut features = Matrix::zeros(rows.len(), d);
    for (r, entries) in rows.iter().enumerate() {
        for &(idx, val) in entries {
            features[(r, idx - 1)] = val;
        }
    }
    Ok(Dataset { features, labels })
}

/// Writes LIBSVM text; zero entries are omitted.
pub fn to_libsvm(ds: &Dataset) -> String {
    let mut out = String::new();
    for r in 0..ds.len() {
        out.push_str(if ds.labels[r] > 0.0 { "+1" } else { "-1" });
        for (j, &v) in ds.features.row(r).iter().enumerate() {
            if v != 0.0 {
                let _ = write!(out, " {}:{}", j + 1, v);
            }
        }
        out.push('\n');
    }
    out
}

fn split_sizes(m: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| m / n + usize::from(i < m % n)).collect()
}

fn shards_from_order(ds: &Dataset, order: &[usize], n: usize) -> Result<Vec<Shard>> {
    let d = ds.dim();
    let mut start = 0;
    split_sizes(ds.len(), n)
        .into_iter()
        .enumerate()
        .map(|(owner, size)| {
            let idx = &order[start..start + size];
            start += size;
            let mut feats = Vec::with_capacity(size * d);
            for &r in idx {
                feats.extend_from_slice(ds.features.row(r));
            }
            Shard::new(
                Matrix::from_vec(size, d, feats)?,
                idx.iter().map(|&r| ds.labels[r]).collect(),
                owner,
            )
        })
        .collect()
}

fn check_split(ds: &Dataset, n: usize) -> Result<()> {
    if n == 0 || n > ds.len() {
        return Err(Error::invalid(format!(
            "cannot split {} samples into {n} shards",
            ds.len()
        )));
    }
    Ok(())
}

/// Label-sorted ("unshuffled") contiguous split: a stable sort by
/// `(label, original index)`, then the first `m mod n` shards take one
/// extra sample.
pub fn partition_unshuffled(ds: &Dataset, n: usize) -> Result<Vec<Shard>> {
    check_split(ds, n)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| ds.labels[a].total_cmp(&ds.labels[b]).then(a.cmp(&b)));
    shards_from_order(ds, &order, n)
}

/// Seeded random split, the homogeneous counterpart of
/// [`partition_unshuffled`].
pub fn partition_shuffled(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<Shard>> {
    check_split(ds, n)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = RngStream::new(seed).for_client(Purpose::Data, 0, 0).rng();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    shards_from_order(ds, &order, n)
}

/// A strongly convex quadratic test problem with known constants.
#[derive(Debug, Clone)]
pub struct QuadraticInstance {
    pub objective: Objective,
    pub shards: Vec<Shard>,
    pub smoothness: SmoothnessInfo,
    pub fstar: f64,
    pub minimizer: Vector,
    /// Per-client minimizers `x_i*`.
    pub local_minimizers: Vec<Vector>,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Random orthogonal matrix by modified Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_rows(&basis).expect("square basis")
}

/// `n` clients with `f_i(x) = 1/2 ||A_i x - b_i||^2`, `A_i` square.
///
/// Every `A_i^T A_i` equals the same `V diag(lambda) V^T` with `lambda`
/// log-spaced on `[1, cond]`, so `mu = 1`, `L = cond` exactly. Client
/// minimizers are at pairwise distance at least 1, which makes the local
/// gradients strongly dissimilar.
pub fn synth_quadratic(n: usize, d: usize, seed: u64, cond: f64) -> Result<QuadraticInstance> {
    if !cond.is_finite() || cond < 1.0 {
        return Err(Error::invalid(format!("cond must be >= 1, got {cond}")));
    }
    if n == 0 || d == 0 {
        return Err(Error::invalid("n and d must be positive"));
    }
    if d == 1 && cond != 1.0 {
        return Err(Error::invalid("d = 1 only admits cond = 1"));
    }
    let mut rng = RngStream::new(seed).for_client(Purpose::Data, 0, 0).rng();
    let eigen: Vec<f64> = (0..d)
        .map(|k| if d == 1 { 1.0 } else { cond.powf(k as f64 / (d - 1) as f64) })
        .collect();
    let v = random_orthogonal(d, &mut rng);

    // S V^T: row k of V^T scaled by sqrt(lambda_k)
    let mut svt = Matrix::zeros(d, d);
    for k in 0..d {
        let s = eigen[k].sqrt();
        for j in 0..d {
            svt[(k, j)] = s * v[(j, k)];
        }
    }

    let mut local_minimizers: Vec<Vector> = Vec::with_capacity(n);
    let mut attempts = 0;
    while local_minimizers.len() < n {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::invalid("could not place separated client minimizers"));
        }
        let cand = Vector::from_vec(
            gaussian_matrix(1, d, &mut rng)
                .remove(0)
                .into_iter()
                .map(|x| 2.0 * x)
                .collect(),
        );
        if local_minimizers.iter().all(|p| p.sub(&cand).norm() >= 1.0) {
            local_minimizers.push(cand);
        }
    }

    let mut shards = Vec::with_capacity(n);
    for (i, xi) in local_minimizers.iter().enumerate() {
        let u = random_orthogonal(d, &mut rng);
        let a = crate::linalg::matmul(&u, &svt)?;
        let b = crate::linalg::matvec(&a, xi)?;
        shards.push(Shard::new(a, b.into_vec(), i)?);
    }

    let mut minimizer = Vector::zeros(d);
    for xi in &local_minimizers {
        minimizer.axpy(1.0 / n as f64, xi);
    }
    let objective = Objective::Quadratic { d };
    let fstar = objective.global_value(&shards, &minimizer)?;
    Ok(QuadraticInstance {
        objective,
        shards,
        smoothness: SmoothnessInfo {
            l: cond,
            mu: Some(1.0),
            sigma: None,
        },
        fstar,
        minimizer,
        local_minimizers,
    })
}

/// Category counts of the one-hot encoded census features: 14 groups, 123
/// binary columns in total.
pub const CENSUS_GROUPS: [usize; 14] = [5, 8, 5, 16, 5, 7, 14, 6, 5, 2, 3, 3, 2, 42];

/// Synthetic stand-in for the one-hot census benchmark: every row activates
/// exactly one column per group (14 ones out of 123), and labels follow a
/// planted logistic model with roughly balanced classes.
pub fn census_like_dataset(m: usize, seed: u64) -> Dataset {
    let d: usize = CENSUS_GROUPS.iter().sum();
    let mut rng = RngStream::new(seed).for_client(Purpose::Data, 1, 0).rng();
    let weights: Vec<f64> = (0..d).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    // skewed category popularity within each group
    let popularity: Vec<Vec<f64>> = CENSUS_GROUPS
        .iter()
        .map(|&g| {
            let raw: Vec<f64> = (0..g).map(|_| rng.random::<f64>().powi(2) + 0.05).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|p| p / total).collect()
        })
        .collect();

    let mut features = Matrix::zeros(m, d);
    let mut scores = Vec::with_capacity(m);
    for r in 0..m {
        let mut offset = 0;
        let mut score = 0.0;
        for (g, probs) in CENSUS_GROUPS.iter().zip(&popularity) {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = g - 1;
            for (c, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = c;
                    break;
                }
            }
            features[(r, offset + pick)] = 1.0;
            score += weights[offset + pick];
            offset += g;
        }
        scores.push(score);
    }
    // center scores so that classes come out roughly balanced
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[m / 2];
    let labels = scores
        .iter()
        .map(|s| {
            let p = 1.0 / (1.0 + (-(s - median)).exp());
            if rng.random::<f64>() < p {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    Dataset { features, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, solve, symmetric_eigenvalues};

    fn parse(text: &str, d: Option<usize>) -> Result<Dataset> {
        parse_libsvm(text.as_bytes(), d)
    }

    #[test]
    fn parse_basic() {
        let ds = parse("+1 1:0.5 3:2\n", Some(3)).unwrap();
        assert_eq!(ds.features.as_slice(), &[0.5, 0.0, 2.0]);
        assert_eq!(ds.labels, vec![1.0]);

        let ds = parse("\n-1 2:1\n\n", Some(3)).unwrap();
        assert_eq!(ds.features.as_slice(), &[0.0, 1.0, 0.0]);
        assert_eq!(ds.labels, vec![-1.0]);

        let ds = parse("0 5:1\n1 1:2\n", None).unwrap();
        assert_eq!(ds.dim(), 5);
        assert_eq!(ds.labels, vec![-1.0, 1.0]);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let cases = [
            ("+1 1:1\n+1 2-3\n", 2),
            ("+1 1:1\n\n+1 3:1 2:1\n", 3),
            ("+1 0:1\n", 1),
            ("+1 1:1 1:2\n", 1),
            ("+1 1:x\n", 1),
            ("2 1:1\n", 1),
            ("abc 1:1\n", 1),
            ("+1 a:1\n", 1),
        ];
        for (text, line) in cases {
            match parse(text, None) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn libsvm_round_trip() {
        let text = "+1 1:0.5 3:2\n-1 2:1e-3 4:7\n+1 4:-0.25\n";
        let ds = parse(text, Some(6)).unwrap();
        let again = parse(&to_libsvm(&ds), Some(ds.dim())).unwrap();
        assert_eq!(again, ds);
    }

    fn toy(labels: &[f64]) -> Dataset {
        let m = labels.len();
        Dataset {
            features: Matrix::from_vec(m, 1, (0..m).map(|i| i as f64).collect()).unwrap(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn unshuffled_split_sorts_by_label() {
        let ds = toy(&[1.0, -1.0, 1.0, -1.0]);
        let shards = partition_unshuffled(&ds, 2).unwrap();
        assert_eq!(shards[0].labels, vec![-1.0, -1.0]);
        assert_eq!(shards[0].features.as_slice(), &[1.0, 3.0]);
        assert_eq!(shards[1].labels, vec![1.0, 1.0]);
        assert_eq!(shards[1].features.as_slice(), &[0.0, 2.0]);

        let one = partition_unshuffled(&ds, 1).unwrap();
        assert_eq!(one[0].features.as_slice(), &[1.0, 3.0, 0.0, 2.0]);
        assert!(partition_unshuffled(&ds, 5).is_err());
    }

    #[test]
    fn split_sizes_balanced() {
        for m in 1..40 {
            for n in 1..=m {
                let sizes = split_sizes(m, n);
                assert_eq!(sizes.iter().sum::<usize>(), m);
                let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
                assert!(hi - lo <= 1);
                assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn quadratic_constants() {
        let inst = synth_quadratic(1, 4, 3, 1.0).unwrap();
        let info = inst.objective.smoothness_estimate(&inst.shards).unwrap();
        assert!((info.l - info.mu.unwrap()).abs() < 1e-10);

        let inst = synth_quadratic(5, 8, 4, 10.0).unwrap();
        let info = inst.objective.smoothness_estimate(&inst.shards).unwrap();
        assert!((info.l / info.mu.unwrap() - 10.0).abs() < 1e-8);
        assert!((info.l - inst.smoothness.l).abs() < 1e-9);

        for (i, a) in inst.local_minimizers.iter().enumerate() {
            for b in &inst.local_minimizers[i + 1..] {
                assert!(a.sub(b).norm() >= 1.0);
            }
        }
    }

    #[test]
    fn quadratic_fstar_matches_normal_equations() {
        let inst = synth_quadratic(4, 6, 9, 25.0).unwrap();
        let d = 6;
        let mut ata = Matrix::zeros(d, d);
        let mut atb = vec![0.0; d];
        for s in &inst.shards {
            ata.axpy(1.0, &matmul(&s.features.transpose(), &s.features).unwrap()).unwrap();
            for r in 0..s.len() {
                for (j, acc) in atb.iter_mut().enumerate() {
                    *acc += s.features[(r, j)] * s.labels[r];
                }
            }
        }
        let xstar = solve(&ata, &atb).unwrap();
        let f = inst.objective.global_value(&inst.shards, &xstar).unwrap();
        assert!((f - inst.fstar).abs() < 1e-10 * inst.fstar.max(1.0));
        assert!(xstar.sub(&inst.minimizer).norm() < 1e-9);
        let ev = symmetric_eigenvalues(&ata.scaled(1.0 / 4.0)).unwrap();
        assert!((ev[0] / ev[d - 1] - 25.0).abs() < 1e-8);
    }

    #[test]
    fn census_like_shape() {
        let ds = census_like_dataset(500, 1);
        assert_eq!(ds.dim(), 123);
        for r in 0..ds.len() {
            assert_eq!(ds.features.row(r).iter().sum::<f64>(), 14.0);
        }
        let pos = ds.labels.iter().filter(|&&l| l > 0.0).count();
        assert!(pos > 150 && pos < 350, "{pos}");
        assert_eq!(ds, census_like_dataset(500, 1));
    }
}
