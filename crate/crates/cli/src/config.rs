//! Experiment configuration (JSON).

use std::fmt;
use std::path::PathBuf;

use declab_core::{Algorithm, Batch, Compressor, GraphKind};
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// A real number or the literal `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Setting {
    #[serde(serialize_with = "auto_str")]
    Auto,
    Value(f64),
}

fn auto_str<S: serde::Serializer>(s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str("auto")
}

impl<'de> Deserialize<'de> for Setting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Setting;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number or \"auto\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Setting, E> {
                Ok(Setting::Value(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Setting, E> {
                Ok(Setting::Value(v as f64))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Setting, E> {
                Ok(Setting::Value(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Setting, E> {
                if v == "auto" {
                    Ok(Setting::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// `"full"` or a positive integer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum BatchSetting {
    #[serde(serialize_with = "full_str")]
    Full,
    Size(usize),
}

fn full_str<S: serde::Serializer>(s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str("full")
}

impl<'de> Deserialize<'de> for BatchSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = BatchSetting;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive integer or \"full\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<BatchSetting, E> {
                if v == 0 {
                    return Err(E::invalid_value(de::Unexpected::Unsigned(0), &self));
                }
                Ok(BatchSetting::Size(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<BatchSetting, E> {
                if v <= 0 {
                    return Err(E::invalid_value(de::Unexpected::Signed(v), &self));
                }
                Ok(BatchSetting::Size(v as usize))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<BatchSetting, E> {
                if v == "full" {
                    Ok(BatchSetting::Full)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

impl From<BatchSetting> for Batch {
    fn from(b: BatchSetting) -> Batch {
        match b {
            BatchSetting::Full => Batch::Full,
            BatchSetting::Size(k) => Batch::Size(k),
        }
    }
}

fn parse_via_fromstr<'de, D, T>(d: D) -> Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: std::str::FromStr,
    T::Err: fmt::Display,
{
    let s = String::deserialize(d)?;
    s.parse().map_err(de::Error::custom)
}

fn display_str<S: serde::Serializer, T: fmt::Display>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    #[serde(deserialize_with = "parse_via_fromstr", serialize_with = "display_str")]
    pub kind: GraphKind,
    pub n: usize,
    #[serde(default)]
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    /// Logistic loss with the nonconvex penalty `reg * sum x^2/(1+x^2)`.
    Logreg { reg: f64 },
    /// Synthetic least squares with known constants.
    Quadratic { d: usize, cond: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    #[default]
    Unshuffled,
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    /// Rows of the synthetic one-hot census-like dataset.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticData>,
    /// Use only the first this many training samples.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub partition: PartitionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovConfig {
    pub c: [f64; 4],
    #[serde(default = "default_exponent")]
    pub exponent: i32,
}

fn default_exponent() -> i32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(deserialize_with = "parse_via_fromstr", serialize_with = "display_str")]
    pub algorithm: Algorithm,
    pub topology: TopologyConfig,
    #[serde(deserialize_with = "parse_via_fromstr", serialize_with = "display_str")]
    pub compressor: Compressor,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub rounds: usize,
    pub batch: BatchSetting,
    pub eta: Setting,
    pub gamma: Setting,
    pub seed: u64,
    pub output: PathBuf,
    #[serde(default)]
    pub lyapunov: Option<LyapunovConfig>,
    /// Compute a reference minimum for logistic objectives (slow).
    #[serde(default)]
    pub reference_minimum: bool,
    #[serde(default = "default_every")]
    pub metrics_every: usize,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub record_time: bool,
    #[serde(default)]
    pub per_edge_bits: bool,
}

fn default_every() -> usize {
    1
}

fn bad(field: &str, msg: impl fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            CliError::Config(if path == "." {
                inner.to_string()
            } else {
                format!("{path}: {inner}")
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks that the JSON types alone cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.rounds < 1 {
            return Err(bad("rounds", "must be >= 1"));
        }
        if self.topology.n < 1 {
            return Err(bad("topology.n", "must be >= 1"));
        }
        if let Some(p) = self.topology.p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(bad("topology.p", format!("must lie in (0, 1], got {p}")));
            }
        }
        if self.topology.kind == GraphKind::ErdosRenyi && self.topology.p.is_none() {
            return Err(bad("topology.p", "required for erdos_renyi"));
        }
        self.compressor
            .validate()
            .map_err(|e| bad("compressor", e))?;
        if let Setting::Value(v) = self.eta {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad("eta", format!("must be > 0, got {v}")));
            }
        }
        if let Setting::Value(v) = self.gamma {
            if !(v > 0.0 && v <= 1.0) {
                return Err(bad("gamma", format!("must lie in (0, 1], got {v}")));
            }
        }
        if self.metrics_every < 1 {
            return Err(bad("metrics_every", "must be >= 1"));
        }
        match &self.objective {
            ObjectiveConfig::Logreg { reg } => {
                if !(*reg >= 0.0 && reg.is_finite()) {
                    return Err(bad("objective.reg", format!("must be >= 0, got {reg}")));
                }
                match (&self.data.path, &self.data.synthetic) {
                    (None, None) => return Err(bad("data", "logreg needs data.path or data.synthetic")),
                    (Some(_), Some(_)) => return Err(bad("data", "give data.path or data.synthetic, not both")),
                    _ => {}
                }
                if let Some(s) = &self.data.synthetic {
                    if s.samples < self.topology.n {
                        return Err(bad("data.synthetic.samples", "fewer samples than clients"));
                    }
                }
            }
            ObjectiveConfig::Quadratic { d, cond } => {
                if *d < 1 {
                    return Err(bad("objective.d", "must be >= 1"));
                }
                if !(*cond >= 1.0 && cond.is_finite()) {
                    return Err(bad("objective.cond", format!("must be >= 1, got {cond}")));
                }
                if self.data.path.is_some() || self.data.synthetic.is_some() {
                    return Err(bad("data", "quadratic objectives generate their own data"));
                }
            }
        }
        if let Some(l) = &self.lyapunov {
            if l.c.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
                return Err(bad("lyapunov.c", "constants must be finite and >= 0"));
            }
        }
        Ok(())
    }
}
