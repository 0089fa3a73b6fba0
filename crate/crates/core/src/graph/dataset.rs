use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense node identifier. `NodeId::NONE` (0) is the "no partner" sentinel;
/// real nodes start at 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const NONE: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0
    }

    pub fn is_none(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One timestamped edge event. Its feature vector lives in the owning
/// [`Dataset`] and is reached with [`Dataset::features`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interaction {
    pub source: NodeId,
    pub target: NodeId,
    pub timestamp: f64,
    pub label: Option<bool>,
    pub ordinal: usize,
}

impl Interaction {
    pub fn touches(&self, node: NodeId) -> bool {
        self.source == node || self.target == node
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// Item ids form a separate id space offset past the users.
    pub bipartite: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { bipartite: true }
    }
}

/// A chronologically ordered interaction stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    interactions: Vec<Interaction>,
    features: Vec<f64>,
    feature_dim: usize,
    num_nodes: usize,
    users: Option<usize>,
}

impl Dataset {
    /// Builds a dataset from already re-indexed edges
    /// `(source, target, timestamp, label)`; `features` is row-major with one
    /// row of `feature_dim` values per edge. `users` marks a bipartite graph
    /// whose sources are `1..=users`.
    pub fn new(
        name: impl Into<String>,
        edges: Vec<(usize, usize, f64, Option<bool>)>,
        features: Vec<f64>,
        feature_dim: usize,
        num_nodes: usize,
        users: Option<usize>,
    ) -> Result<Self> {
        if features.len() != edges.len() * feature_dim {
            return Err(Error::Data(format!(
                "{} feature values for {} edges of width {feature_dim}",
                features.len(),
                edges.len()
            )));
        }
        let mut interactions = Vec::with_capacity(edges.len());
        let mut last = f64::NEG_INFINITY;
        for (ordinal, (s, t, ts, label)) in edges.into_iter().enumerate() {
            if !(ts.is_finite() && ts >= 0.0) {
                return Err(Error::Data(format!("edge {ordinal}: invalid timestamp {ts}")));
            }
            if ts < last {
                return Err(Error::Data(format!(
                    "edge {ordinal}: timestamp {ts} precedes {last}"
                )));
            }
            if s == 0 || t == 0 || s > num_nodes || t > num_nodes {
                return Err(Error::Data(format!(
                    "edge {ordinal}: node ids ({s}, {t}) outside 1..={num_nodes}"
                )));
            }
            last = ts;
            interactions.push(Interaction {
                source: NodeId(s),
                target: NodeId(t),
                timestamp: ts,
                label,
                ordinal,
            });
        }
        Ok(Dataset {
            name: name.into(),
            interactions,
            features,
            feature_dim,
            num_nodes,
            users,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn interaction(&self, ordinal: usize) -> &Interaction {
        &self.interactions[ordinal]
    }

    pub fn features(&self, ordinal: usize) -> &[f64] {
        &self.features[ordinal * self.feature_dim..(ordinal + 1) * self.feature_dim]
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Number of real nodes; ids run over `1..=num_nodes`.
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Size of per-node tables including the sentinel slot.
    pub fn node_capacity(&self) -> usize {
        self.num_nodes + 1
    }

    pub fn users(&self) -> Option<usize> {
        self.users
    }

    pub fn is_bipartite(&self) -> bool {
        self.users.is_some()
    }

    /// Candidate destinations for negative sampling and ranking: the items of
    /// a bipartite graph, every node otherwise.
    pub fn destination_nodes(&self) -> Vec<NodeId> {
        let first = self.users.map_or(1, |u| u + 1);
        (first..=self.num_nodes).map(NodeId).collect()
    }

    pub fn max_timestamp(&self) -> f64 {
        self.interactions.last().map_or(0.0, |i| i.timestamp)
    }

    /// True when at least one interaction carries a positive state label.
    pub fn has_labels(&self) -> bool {
        self.interactions.iter().any(|i| i.label == Some(true))
    }

    /// Dataset restricted to its first `n` interactions.
    pub fn prefix(&self, n: usize) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::Data(format!(
                "prefix of {n} interactions requested from a stream of {}",
                self.len()
            )));
        }
        Ok(Dataset {
            name: format!("{}[..{n}]", self.name),
            interactions: self.interactions[..n].to_vec(),
            features: self.features[..n * self.feature_dim].to_vec(),
            feature_dim: self.feature_dim,
            num_nodes: self.num_nodes,
            users: self.users,
        })
    }

    /// Mutable access to one edge's features (fixtures and tests).
    pub fn features_mut(&mut self, ordinal: usize) -> &mut [f64] {
        let d = self.feature_dim;
        &mut self.features[ordinal * d..(ordinal + 1) * d]
    }

    /// Writes the stream back in the CSV layout accepted by [`load_stream`],
    /// using the original (zero-based, un-offset) ids.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut out = String::from("user_id,item_id,timestamp,state_label,comma_separated_list_of_features\n");
        let offset = self.users.unwrap_or(0);
        for e in &self.interactions {
            let _ = write!(
                out,
                "{},{},{},{}",
                e.source.0 - 1,
                e.target.0 - 1 - offset,
                e.timestamp,
                u8::from(e.label == Some(true))
            );
            for f in self.features(e.ordinal) {
                let _ = write!(out, ",{f}");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Loads a JODIE-style CSV: a header row, then
/// `user_id,item_id,timestamp,state_label,f0,f1,...` per line.
pub fn load_stream(path: &Path, options: LoadOptions) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map_or_else(|| "stream".to_string(), |s| s.to_string_lossy().into_owned());
    parse_stream(&text, &name, options).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub(crate) fn parse_stream(text: &str, name: &str, options: LoadOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| Error::Data(format!("line 1: {e}")))?,
        None => return Err(Error::Data("empty file".to_string())),
    };
    if header.len() < 4 || header[0].parse::<f64>().is_ok() {
        return Err(Error::Data(format!(
            "line 1: expected header `user_id,item_id,timestamp,state_label,...`, got {:?}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut raw: Vec<(usize, usize, f64, Option<bool>)> = Vec::new();
    let mut features = Vec::new();
    let mut feature_dim: Option<usize> = None;
    let mut last_ts = f64::NEG_INFINITY;
    for record in records {
        let record = record.map_err(|e| Error::Data(e.to_string()))?;
        let lineno = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() < 4 {
            return Err(Error::Data(format!(
                "line {lineno}: expected at least 4 fields, got {}",
                record.len()
            )));
        }
        let bad = |what: &str, v: &str| Error::Data(format!("line {lineno}: malformed {what} {v:?}"));
        let user: usize = record[0].parse().map_err(|_| bad("user id", &record[0]))?;
        let item: usize = record[1].parse().map_err(|_| bad("item id", &record[1]))?;
        let ts: f64 = record[2].parse().map_err(|_| bad("timestamp", &record[2]))?;
        if !ts.is_finite() || ts < 0.0 {
            return Err(bad("timestamp", &record[2]));
        }
        if ts < last_ts {
            return Err(Error::Data(format!(
                "line {lineno}: timestamp {ts} is earlier than the previous row ({last_ts})"
            )));
        }
        last_ts = ts;
        let label = if record[3].is_empty() {
            None
        } else {
            let v: f64 = record[3].parse().map_err(|_| bad("state label", &record[3]))?;
            Some(v != 0.0)
        };
        let row_features: Vec<&str> = record.iter().skip(4).collect();
        let width = if row_features.len() == 1 && row_features[0].is_empty() {
            0
        } else {
            row_features.len()
        };
        match feature_dim {
            None => feature_dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::Data(format!(
                    "line {lineno}: {width} features, earlier rows have {d}"
                )))
            }
            _ => {}
        }
        for f in &row_features[..width] {
            features.push(f.parse::<f64>().map_err(|_| bad("feature", f))?);
        }
        raw.push((user, item, ts, label));
    }

    let feature_dim = feature_dim.unwrap_or(0);
    let max_user = raw.iter().map(|r| r.0).max().unwrap_or(0);
    let max_item = raw.iter().map(|r| r.1).max().unwrap_or(0);
    let (edges, num_nodes, users) = if options.bipartite {
        let users = max_user + 1;
        let edges = raw
            .into_iter()
            .map(|(u, i, t, l)| (u + 1, users + i + 1, t, l))
            .collect();
        (edges, users + max_item + 1, Some(users))
    } else {
        let edges = raw.into_iter().map(|(u, i, t, l)| (u + 1, i + 1, t, l)).collect();
        (edges, max_user.max(max_item) + 1, None)
    };
    Dataset::new(name, edges, features, feature_dim, num_nodes, users)
}

/// Chronological train/validation/test ordinal ranges plus the nodes unseen
/// during training.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    new_nodes: Vec<bool>,
}

impl Split {
    pub fn is_new(&self, node: NodeId) -> bool {
        self.new_nodes.get(node.0).copied().unwrap_or(false)
    }

    pub fn new_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.new_nodes
            .iter()
            .enumerate()
            .filter(|(_, &n)| n)
            .map(|(i, _)| NodeId(i))
    }

    /// Ordinals in `range` with at least one endpoint unseen in training.
    pub fn inductive(&self, dataset: &Dataset, range: Range<usize>) -> Vec<usize> {
        dataset.interactions()[range]
            .iter()
            .filter(|e| self.is_new(e.source) || self.is_new(e.target))
            .map(|e| e.ordinal)
            .collect()
    }

    pub fn inductive_test(&self, dataset: &Dataset) -> Vec<usize> {
        self.inductive(dataset, self.test.clone())
    }
}

/// Splits by interaction count in stream order. Train and validation sizes
/// are floored; the remainder goes to test.
pub fn chronological_split(dataset: &Dataset, fractions: (f64, f64, f64)) -> Result<Split> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = dataset.len();
    let n_train = (n as f64 * ft + 1e-9).floor() as usize;
    let n_val = (n as f64 * fv + 1e-9).floor() as usize;
    let n_test = n.saturating_sub(n_train + n_val);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Data(format!(
            "split of {n} interactions leaves an empty range ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut seen = HashSet::new();
    for e in &dataset.interactions()[..n_train] {
        seen.insert(e.source);
        seen.insert(e.target);
    }
    let mut new_nodes = vec![false; dataset.node_capacity()];
    for e in &dataset.interactions()[n_train..] {
        for node in [e.source, e.target] {
            if !seen.contains(&node) {
                new_nodes[node.0] = true;
            }
        }
    }
    Ok(Split {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..n,
        new_nodes,
    })
}

/// Time since the source node's previous appearance (as either endpoint);
/// 0 on its first appearance.
pub fn interaction_interval(dataset: &Dataset, ordinal: usize) -> f64 {
    let e = dataset.interaction(ordinal);
    dataset.interactions()[..ordinal]
        .iter()
        .rev()
        .find(|p| p.touches(e.source))
        .map_or(0.0, |p| e.timestamp - p.timestamp)
}

/// [`interaction_interval`] for every interaction, in one pass.
pub fn interaction_intervals(dataset: &Dataset) -> Vec<f64> {
    let mut last_seen: Vec<Option<f64>> = vec![None; dataset.node_capacity()];
    dataset
        .interactions()
        .iter()
        .map(|e| {
            let dt = last_seen[e.source.0].map_or(0.0, |t| e.timestamp - t);
            last_seen[e.source.0] = Some(e.timestamp);
            last_seen[e.target.0] = Some(e.timestamp);
            dt
        })
        .collect()
}
