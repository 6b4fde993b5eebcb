//! Library side of the `declab` command: configuration, experiment
//! assembly, and the text reports of the inspection subcommands.

pub mod config;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use declab_core::algorithms::{minimal_rate_constants, search_rate_constants, verify_rate_constants};
use declab_core::data::{census_like_dataset, parse_libsvm, partition_shuffled, to_libsvm, Dataset};
use declab_core::linalg::symmetric_eigenvalues;
use declab_core::{
    build_graph, metropolis_weights, partition_unshuffled, run, synth_quadratic, theoretical_stepsizes, write_csv,
    Compressor, Error, GraphKind, HyperParams, LyapunovSpec, MetricsRow, MixingMatrix, Objective, Problem, RngStream,
    RunSpec, Shard, Vector,
};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::{ExperimentConfig, ObjectiveConfig, PartitionKind, Setting};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Diverged(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Diverged(m) => write!(f, "diverged: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn config_err(e: Error) -> CliError {
    CliError::Config(e.to_string())
}

fn run_err(e: Error) -> CliError {
    match e {
        Error::Diverged { .. } => CliError::Diverged(e.to_string()),
        Error::Parse { .. } => CliError::Data(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}

pub fn build_mixing(kind: GraphKind, n: usize, p: Option<f64>, seed: u64) -> Result<MixingMatrix, CliError> {
    if n == 1 {
        return Ok(MixingMatrix::single_node());
    }
    let graph = build_graph(kind, n, p, seed).map_err(config_err)?;
    metropolis_weights(&graph).map_err(config_err)
}

fn load_libsvm(path: &Path, d_hint: Option<usize>) -> Result<Dataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_libsvm(BufReader::new(file), d_hint).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Everything an experiment needs, assembled from a config.
pub struct Experiment {
    pub mixing: MixingMatrix,
    pub objective: Objective,
    pub shards: Vec<Shard>,
    pub test: Option<Vec<Shard>>,
    pub compressor: Compressor,
    pub l: f64,
    pub mu: Option<f64>,
    pub fstar: Option<f64>,
}

pub fn assemble(cfg: &ExperimentConfig, seed: u64) -> Result<Experiment, CliError> {
    let n = cfg.topology.n;
    let mixing = build_mixing(cfg.topology.kind, n, cfg.topology.p, seed)?;
    let (objective, shards, test, l, mu, fstar) = match &cfg.objective {
        ObjectiveConfig::Quadratic { d, cond } => {
            let inst = synth_quadratic(n, *d, seed, *cond).map_err(config_err)?;
            (inst.objective, inst.shards, None, inst.smoothness.l, inst.smoothness.mu, Some(inst.fstar))
        }
        ObjectiveConfig::Logreg { reg } => {
            let mut train = match (&cfg.data.path, &cfg.data.synthetic) {
                (Some(path), _) => load_libsvm(path, None)?,
                (None, Some(s)) => census_like_dataset(s.samples, seed),
                (None, None) => return Err(CliError::Config("data: no training data".into())),
            };
            if let Some(limit) = cfg.data.limit {
                train = train.head(limit);
            }
            if train.len() < n {
                return Err(CliError::Data(format!("{} samples cannot fill {n} clients", train.len())));
            }
            let mut test = match &cfg.data.test_path {
                Some(p) => Some(load_libsvm(p, Some(train.dim()))?),
                None => None,
            };
            // a test file may reach a higher feature index than the training file
            if let Some(t) = &test {
                if t.dim() > train.dim() {
                    train = widen(&train, t.dim());
                }
            }
            if let Some(t) = &mut test {
                if t.dim() < train.dim() {
                    *t = widen(t, train.dim());
                }
            }
            let shards = match cfg.data.partition {
                PartitionKind::Unshuffled => partition_unshuffled(&train, n),
                PartitionKind::Shuffled => partition_shuffled(&train, n, seed),
            }
            .map_err(config_err)?;
            let objective = Objective::LogRegNcvx { reg: *reg, d: train.dim() };
            let info = objective.smoothness_estimate(&shards).map_err(config_err)?;
            let test = test.map(|t| t.as_shard(0).map(|s| vec![s])).transpose().map_err(config_err)?;
            let fstar = if cfg.reference_minimum {
                let x0 = vec![0.0; train.dim()];
                let (_, f) = objective
                    .reference_minimum(&shards, &x0, info.l, 1e-10, 1_000_000)
                    .map_err(config_err)?;
                Some(f)
            } else {
                None
            };
            (objective, shards, test, info.l, info.mu, fstar)
        }
    };
    Ok(Experiment {
        mixing,
        objective,
        shards,
        test,
        compressor: cfg.compressor.clone(),
        l,
        mu,
        fstar,
    })
}

fn widen(ds: &Dataset, d: usize) -> Dataset {
    let text = to_libsvm(ds);
    parse_libsvm(text.as_bytes(), Some(d)).expect("serialized dataset reparses")
}

/// Step sizes actually used: explicit values as given, `"auto"` from the
/// theoretical rule with the measured alpha, rho, C and L. An automatic
/// `eta` is derived from whichever `gamma` is in effect.
pub fn resolve_steps(cfg: &ExperimentConfig, exp: &Experiment) -> Result<HyperParams, CliError> {
    let d = exp.objective.dim();
    let alpha = exp.compressor.alpha_of(d);
    let (rho, c) = (exp.mixing.rho(), exp.mixing.c());
    let auto = theoretical_stepsizes(alpha, rho, c, exp.l, None, None).map_err(config_err)?;
    let gamma = match cfg.gamma {
        Setting::Auto => auto.gamma,
        Setting::Value(g) => g,
    };
    let eta = match cfg.eta {
        Setting::Auto => auto.eta / auto.gamma * gamma,
        Setting::Value(e) => e,
    };
    Ok(HyperParams { eta, gamma, batch: cfg.batch.into() })
}

#[derive(Debug, Serialize)]
pub struct Metadata<'a> {
    pub tool_version: &'static str,
    pub config: &'a ExperimentConfig,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    pub rho: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub mu: Option<f64>,
    pub fstar: Option<f64>,
    pub eta: f64,
    pub gamma: f64,
    pub rounds_completed: usize,
    pub bits_per_round: u64,
}

pub struct RunReport {
    pub csv: PathBuf,
    pub metadata: PathBuf,
    pub rows: Vec<MetricsRow>,
}

pub fn metadata_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    seed_override: Option<u64>,
    output_override: Option<PathBuf>,
) -> Result<RunReport, CliError> {
    let seed = seed_override.unwrap_or(cfg.seed);
    let output = output_override.unwrap_or_else(|| cfg.output.clone());
    let exp = assemble(cfg, seed)?;
    let hp = resolve_steps(cfg, &exp)?;
    let d = exp.objective.dim();

    let mut spec = RunSpec::new(cfg.algorithm, hp, cfg.rounds, Vector::zeros(d), seed);
    spec.parallel = cfg.parallel;
    spec.fstar = exp.fstar;
    spec.per_edge_bits = cfg.per_edge_bits;
    spec.metrics_every = cfg.metrics_every;
    spec.record_time = cfg.record_time;
    spec.lyapunov = match (&cfg.lyapunov, exp.fstar) {
        (Some(l), Some(fstar)) => Some(LyapunovSpec {
            consts: l.c,
            exponent: l.exponent,
            rho: exp.mixing.rho(),
            l: exp.l,
            fstar,
        }),
        (Some(_), None) => {
            return Err(CliError::Config(
                "lyapunov: needs a known minimum (quadratic objective or reference_minimum: true)".into(),
            ))
        }
        _ => None,
    };
    let problem = Problem {
        mixing: &exp.mixing,
        objective: &exp.objective,
        shards: &exp.shards,
        compressor: &exp.compressor,
        test: exp.test.as_deref(),
    };
    let rows = run(&spec, &problem).map_err(run_err)?;

    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", output.display()));
    let file = File::create(&output).map_err(io)?;
    write_csv(&rows, BufWriter::new(file)).map_err(io)?;

    let meta = Metadata {
        tool_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        seed,
        n: exp.shards.len(),
        d,
        alpha: exp.compressor.alpha_of(d),
        rho: exp.mixing.rho(),
        c: exp.mixing.c(),
        l: exp.l,
        mu: exp.mu,
        fstar: exp.fstar,
        eta: hp.eta,
        gamma: hp.gamma,
        rounds_completed: rows.last().map_or(0, |r| r.round),
        bits_per_round: declab_core::algorithms::round_bits(
            cfg.algorithm,
            &exp.compressor,
            d,
            &exp.mixing,
            cfg.per_edge_bits,
        ),
    };
    let meta_path = metadata_path(&output);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(&meta_path, json + "\n").map_err(|e| CliError::Io(format!("{}: {e}", meta_path.display())))?;
    Ok(RunReport { csv: output, metadata: meta_path, rows })
}

/// Spectral summary of the Metropolis matrix of a topology.
pub fn spectral_report(kind: GraphKind, n: usize, p: Option<f64>, seed: u64) -> Result<String, CliError> {
    let mixing = build_mixing(kind, n, p, seed)?;
    let eig = symmetric_eigenvalues(mixing.weights()).map_err(config_err)?;
    // eigenvalues are sorted descending; the top one is 1
    let second = eig[1..].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut out = String::new();
    let _ = writeln!(out, "topology = {kind}");
    let _ = writeln!(out, "n = {n}");
    let _ = writeln!(out, "rho = {}", mixing.rho());
    let _ = writeln!(out, "C = {}", mixing.c());
    let _ = writeln!(out, "1 - |lambda_2| (recomputed) = {}", 1.0 - second);
    let _ = writeln!(
        out,
        "eigenvalues = [{}]",
        eig.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", ")
    );
    Ok(out)
}

/// Slack report for explicit constants; the verdict is the last line.
pub fn check_constants_report(
    consts: [f64; 4],
    c_gamma: f64,
    c_eta: f64,
    c: f64,
    kappa: Option<f64>,
) -> (bool, String) {
    let check = verify_rate_constants(consts, c_gamma, c_eta, c, kappa);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "system = {}",
        kappa.map_or("nonconvex".to_string(), |k| format!("PL (kappa = {k})"))
    );
    for (i, s) in check.slacks.iter().enumerate() {
        let _ = writeln!(out, "row {} slack = {s:e}", i + 1);
    }
    let _ = writeln!(out, "{}", if check.feasible { "FEASIBLE" } else { "INFEASIBLE" });
    (check.feasible, out)
}

/// Grid search over `c_gamma, c_eta = 2^-k`; reports the best tuple.
pub fn search_constants_report(c: f64, kappa: Option<f64>, max_k: u32) -> (bool, String) {
    match search_rate_constants(c, kappa, max_k) {
        Some(found) => {
            let (ok, report) = check_constants_report(found.c, found.c_gamma, found.c_eta, c, kappa);
            let head = format!(
                "c_gamma = {}\nc_eta = {}\nc1..c4 = {:?}\n",
                found.c_gamma, found.c_eta, found.c
            );
            (ok, head + &report)
        }
        None => (false, format!("no feasible tuple with exponents up to {max_k}\nINFEASIBLE\n")),
    }
}

/// Least `c1..c4` for given `c_gamma, c_eta` (used by `check-constants
/// --c-gamma .. --c-eta ..` without explicit `c1..c4`).
pub fn least_constants(c_gamma: f64, c_eta: f64, c: f64, kappa: Option<f64>) -> Option<[f64; 4]> {
    minimal_rate_constants(c_gamma, c_eta, c, kappa)
}

/// Empirical contraction of a compressor on Gaussian vectors.
pub fn compress_bench_report(comp: &Compressor, d: usize, trials: usize, seed: u64) -> Result<(bool, String), CliError> {
    if trials < 2 {
        return Err(CliError::Config("trials: must be >= 2".into()));
    }
    let alpha = comp.alpha_of(d);
    let master = RngStream::new(seed);
    let (mut sum, mut sum_sq, mut worst) = (0.0, 0.0, 0.0f64);
    for t in 0..trials {
        let x = gaussian_vector(&master.derive(2 * t as u64), d);
        let cx = comp
            .compress(&x, &master.derive(2 * t as u64 + 1))
            .map_err(|e| CliError::Config(format!("compressor: {e}")))?;
        let r = cx.sub(&x).norm_sq() / x.norm_sq();
        sum += r;
        sum_sq += r * r;
        worst = worst.max(r);
    }
    let mean = sum / trials as f64;
    let var = (sum_sq / trials as f64 - mean * mean).max(0.0);
    let se = (var / trials as f64).sqrt();
    let limit = 1.0 - alpha + 3.0 * se;
    let pass = mean <= limit && (!comp.is_deterministic() || worst <= 1.0 - alpha + 1e-12);
    let mut out = String::new();
    let _ = writeln!(out, "compressor = {comp}");
    let _ = writeln!(out, "d = {d}");
    let _ = writeln!(out, "trials = {trials}");
    let _ = writeln!(out, "nominal alpha = {alpha}");
    let _ = writeln!(out, "mean ||C(x)-x||^2/||x||^2 = {mean}");
    let _ = writeln!(out, "max ratio = {worst}");
    let _ = writeln!(out, "standard error = {se}");
    let _ = writeln!(out, "bound 1 - alpha + 3 SE = {limit}");
    let _ = writeln!(out, "{}", if pass { "PASS" } else { "FAIL" });
    Ok((pass, out))
}

fn gaussian_vector(stream: &RngStream, d: usize) -> Vector {
    let mut rng = stream.rng();
    Vector::from_vec((0..d).map(|_| rng.sample(StandardNormal)).collect())
}
