//! Run configuration.
//!
//! Files are TOML restricted to `key = value` pairs, either under
//! `[section]` headers or written as dotted keys:
//!
//! ```toml
//! [model]
//! dim = 32
//! ode.solver = "euler"
//! ```
//!
//! Every key has a built-in default. Precedence is: command-line overrides,
//! then the file, then defaults; [`Config::canonical`] renders the fully
//! resolved set and [`Config::fingerprint`] hashes it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const CHOICES: &'static [&'static str] = &[$($text),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "{other:?} is not one of {:?}",
                        Self::CHOICES
                    ))),
                }
            }
        }
    };
}

keyword_enum!(
    /// Link decoder architecture.
    DecoderKind { Dot => "dot", Mlp => "mlp" }
);
keyword_enum!(
    /// Fixed-step ODE integrator.
    Solver { Euler => "euler", Rk4 => "rk4" }
);
keyword_enum!(
    /// Whether the latest-partner adjacency is mirrored.
    AdjacencyKind { Symmetric => "symmetric", Directed => "directed" }
);
keyword_enum!(
    /// Squashing applied to the ODE terminal state before it becomes memory.
    MemoryBound { None => "none", Tanh => "tanh" }
);
keyword_enum!(
    /// Neighbor selection for the attention layer.
    NeighborStrategy { MostRecent => "most-recent", Uniform => "uniform" }
);
keyword_enum!(
    /// Time fed to the query row of the attention layer.
    QueryTime { ZeroDelta => "zero-delta", Absolute => "absolute" }
);

/// End time of the ODE integration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Horizon {
    Fixed(f64),
    /// Each node integrates over its own interval since its last update.
    RealInterval,
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Fixed(t) => write!(f, "{t:?}"),
            Horizon::RealInterval => f.write_str("real-interval"),
        }
    }
}

impl FromStr for Horizon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "real-interval" {
            return Ok(Horizon::RealInterval);
        }
        let t: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("horizon {s:?} is neither a number nor \"real-interval\"")))?;
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {t}")));
        }
        Ok(Horizon::Fixed(t))
    }
}

/// Component switches for the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Skip the ODE update; memory embeddings keep their initial value.
    pub no_update: bool,
    /// Replace the three gates by the constant 1.
    pub no_adaptive: bool,
    /// Drop the latest-interaction term.
    pub no_latest: bool,
    /// Drop the neighbor term.
    pub no_neighbor: bool,
    /// Drop the inherent-decay term.
    pub no_inherent: bool,
    /// Use the memory embedding directly instead of the attention output.
    pub no_transform: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 6] = [
        "no_update",
        "no_adaptive",
        "no_latest",
        "no_neighbor",
        "no_inherent",
        "no_transform",
    ];

    fn slot(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "no_update" => &mut self.no_update,
            "no_adaptive" => &mut self.no_adaptive,
            "no_latest" => &mut self.no_latest,
            "no_neighbor" => &mut self.no_neighbor,
            "no_inherent" => &mut self.no_inherent,
            "no_transform" => &mut self.no_transform,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = self.slot(name).ok_or_else(|| {
            Error::Config(format!("unknown ablation {name:?}; expected one of {:?}", Self::NAMES))
        })?;
        *slot = on;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        let mut copy = *self;
        copy.slot(name).map(|s| *s)
    }

    pub fn active(&self) -> Vec<&'static str> {
        Self::NAMES
            .iter()
            .copied()
            .filter(|n| self.get(n) == Some(true))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    /// Width of the time encoding (twice the number of frequencies).
    pub time_dim: usize,
    pub beta: f64,
    pub dropout: f64,
    pub decoder: DecoderKind,
    pub shared_time_encoder: bool,
    pub solver: Solver,
    pub steps: usize,
    pub horizon: Horizon,
    pub adjacency: AdjacencyKind,
    pub bound: MemoryBound,
    pub heads: usize,
    pub neighbors: usize,
    pub strategy: NeighborStrategy,
    pub query_time: QueryTime,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 172,
            time_dim: 172,
            beta: 0.95,
            dropout: 0.1,
            decoder: DecoderKind::Mlp,
            shared_time_encoder: true,
            solver: Solver::Rk4,
            steps: 4,
            horizon: Horizon::Fixed(1.0),
            adjacency: AdjacencyKind::Symmetric,
            bound: MemoryBound::Tanh,
            heads: 2,
            neighbors: 15,
            strategy: NeighborStrategy::MostRecent,
            query_time: QueryTime::ZeroDelta,
            ablation: Ablation::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Negatives per positive.
    pub negatives: usize,
    pub lr: f64,
    pub seed: u64,
    pub patience: usize,
    pub deterministic: bool,
    /// Use the loss exactly as printed, with `sigma(-s)` on positives too.
    pub negate_positive_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 200,
            epochs: 50,
            negatives: 1,
            lr: 1e-4,
            seed: 0,
            patience: 5,
            deterministic: false,
            negate_positive_loss: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub bipartite: bool,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            bipartite: true,
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl DataConfig {
    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.train, self.val, self.test)
    }
}

/// Post-hoc node classifier trained on frozen embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            hidden: vec![80, 10],
            dropout: 0.1,
            epochs: 30,
            lr: 1e-3,
            batch_size: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub classify: ClassifyConfig,
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    let trimmed = raw.trim().trim_start_matches('[').trim_end_matches(']');
    if trimmed.trim().is_empty() {
        return Ok(Vec::new());
    }
    trimmed.split(',').map(|p| parse(key, p)).collect()
}

impl Config {
    /// Every recognised key.
    pub fn keys() -> Vec<String> {
        Config::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Config::default();
        config.merge_str(&text)?;
        Ok(config)
    }

    /// Applies every key of a TOML document on top of the current values.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat)?;
        for (key, raw) in flat {
            self.set(&key, &raw)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        self.set(key.trim(), value)
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.dim" => m.dim = parse(key, raw)?,
            "model.time_dim" => m.time_dim = parse(key, raw)?,
            "model.beta" => m.beta = parse(key, raw)?,
            "model.dropout" => m.dropout = parse(key, raw)?,
            "model.decoder" => m.decoder = raw.trim().parse()?,
            "model.shared_time_encoder" => m.shared_time_encoder = parse_bool(key, raw)?,
            "ode.solver" => m.solver = raw.trim().parse()?,
            "ode.steps" => m.steps = parse(key, raw)?,
            "ode.horizon" => m.horizon = raw.trim().parse()?,
            "ode.adjacency" => m.adjacency = raw.trim().parse()?,
            "ode.bound" => m.bound = raw.trim().parse()?,
            "attention.heads" => m.heads = parse(key, raw)?,
            "attention.neighbors" => m.neighbors = parse(key, raw)?,
            "attention.strategy" => m.strategy = raw.trim().parse()?,
            "attention.query_time" => m.query_time = raw.trim().parse()?,
            "train.batch_size" => t.batch_size = parse(key, raw)?,
            "train.epochs" => t.epochs = parse(key, raw)?,
            "train.negatives" => t.negatives = parse(key, raw)?,
            "train.lr" => t.lr = parse(key, raw)?,
            "train.seed" => t.seed = parse(key, raw)?,
            "train.patience" => t.patience = parse(key, raw)?,
            "train.deterministic" => t.deterministic = parse_bool(key, raw)?,
            "loss.negate_positive" => t.negate_positive_loss = parse_bool(key, raw)?,
            "data.bipartite" => self.data.bipartite = parse_bool(key, raw)?,
            "data.train" => self.data.train = parse(key, raw)?,
            "data.val" => self.data.val = parse(key, raw)?,
            "data.test" => self.data.test = parse(key, raw)?,
            "classify.hidden" => self.classify.hidden = parse_list(key, raw)?,
            "classify.dropout" => self.classify.dropout = parse(key, raw)?,
            "classify.epochs" => self.classify.epochs = parse(key, raw)?,
            "classify.lr" => self.classify.lr = parse(key, raw)?,
            "classify.batch_size" => self.classify.batch_size = parse(key, raw)?,
            _ => match key.strip_prefix("ablation.") {
                Some(name) => m.ablation.set(name, parse_bool(key, raw)?)?,
                None => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    /// Resolved `(key, value)` pairs, sorted by key.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let t = &self.train;
        let mut out: Vec<(String, String)> = vec![
            ("model.dim".into(), m.dim.to_string()),
            ("model.time_dim".into(), m.time_dim.to_string()),
            ("model.beta".into(), format!("{:?}", m.beta)),
            ("model.dropout".into(), format!("{:?}", m.dropout)),
            ("model.decoder".into(), m.decoder.to_string()),
            ("model.shared_time_encoder".into(), m.shared_time_encoder.to_string()),
            ("ode.solver".into(), m.solver.to_string()),
            ("ode.steps".into(), m.steps.to_string()),
            ("ode.horizon".into(), m.horizon.to_string()),
            ("ode.adjacency".into(), m.adjacency.to_string()),
            ("ode.bound".into(), m.bound.to_string()),
            ("attention.heads".into(), m.heads.to_string()),
            ("attention.neighbors".into(), m.neighbors.to_string()),
            ("attention.strategy".into(), m.strategy.to_string()),
            ("attention.query_time".into(), m.query_time.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.negatives".into(), t.negatives.to_string()),
            ("train.lr".into(), format!("{:?}", t.lr)),
            ("train.seed".into(), t.seed.to_string()),
            ("train.patience".into(), t.patience.to_string()),
            ("train.deterministic".into(), t.deterministic.to_string()),
            ("loss.negate_positive".into(), t.negate_positive_loss.to_string()),
            ("data.bipartite".into(), self.data.bipartite.to_string()),
            ("data.train".into(), format!("{:?}", self.data.train)),
            ("data.val".into(), format!("{:?}", self.data.val)),
            ("data.test".into(), format!("{:?}", self.data.test)),
            (
                "classify.hidden".into(),
                self.classify
                    .hidden
                    .iter()
                    .map(|h| h.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("classify.dropout".into(), format!("{:?}", self.classify.dropout)),
            ("classify.epochs".into(), self.classify.epochs.to_string()),
            ("classify.lr".into(), format!("{:?}", self.classify.lr)),
            ("classify.batch_size".into(), self.classify.batch_size.to_string()),
        ];
        for name in Ablation::NAMES {
            out.push((
                format!("ablation.{name}"),
                m.ablation.get(name).unwrap_or(false).to_string(),
            ));
        }
        out.sort();
        out
    }

    /// One `key=value` line per key, sorted.
    pub fn canonical(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// SHA-256 of [`Config::canonical`], hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let fail = |msg: String| Err(Error::Config(msg));
        if m.dim == 0 {
            return fail("model.dim must be positive".into());
        }
        if m.time_dim == 0 || m.time_dim % 2 != 0 {
            return fail(format!("model.time_dim must be a positive even number, got {}", m.time_dim));
        }
        if !(m.beta > 0.0 && m.beta < 1.0) {
            return fail(format!("model.beta must lie in (0, 1), got {}", m.beta));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return fail(format!("model.dropout must lie in [0, 1), got {}", m.dropout));
        }
        if m.steps == 0 {
            return fail("ode.steps must be at least 1".into());
        }
        if m.heads == 0 || m.dim % m.heads != 0 {
            return fail(format!(
                "attention.heads ({}) must be positive and divide model.dim ({})",
                m.heads, m.dim
            ));
        }
        if m.neighbors == 0 {
            return fail("attention.neighbors must be at least 1".into());
        }
        if t.batch_size == 0 || t.negatives == 0 {
            return fail("train.batch_size and train.negatives must be at least 1".into());
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return fail(format!("train.lr must be a non-negative number, got {}", t.lr));
        }
        let d = &self.data;
        if [d.train, d.val, d.test].iter().any(|f| !(0.0..=1.0).contains(f))
            || (d.train + d.val + d.test - 1.0).abs() > 1e-9
        {
            return fail(format!(
                "data.train/val/test must lie in [0, 1] and sum to 1, got {}/{}/{}",
                d.train, d.val, d.test
            ));
        }
        if !(0.0..1.0).contains(&self.classify.dropout) {
            return fail("classify.dropout must lie in [0, 1)".into());
        }
        if self.classify.batch_size == 0 {
            return fail("classify.batch_size must be at least 1".into());
        }
        Ok(())
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let raw = match v {
            toml::Value::Table(inner) => {
                flatten(&key, inner, out)?;
                continue;
            }
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => format!("{f:?}"),
            toml::Value::Boolean(b) => b.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            toml::Value::Datetime(_) => {
                return Err(Error::Config(format!("{key}: datetime values are not supported")))
            }
        };
        out.push((key, raw));
    }
    Ok(())
}
