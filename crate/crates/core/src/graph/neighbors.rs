use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Interaction, NodeId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborEntry {
    pub partner: NodeId,
    pub ordinal: usize,
    pub timestamp: f64,
}

/// How to pick at most `k` neighbors from a node's history.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingStrategy {
    /// The `k` latest interactions.
    MostRecent,
    /// `k` interactions drawn without replacement. The draw is seeded from
    /// `(seed, node, t)` so a query's answer does not depend on what was
    /// queried before it.
    Uniform { seed: u64 },
}

/// Append-only per-node interaction history, sorted by time.
#[derive(Clone, Debug, Default)]
pub struct TemporalNeighborIndex {
    lists: Vec<Vec<NeighborEntry>>,
}

impl TemporalNeighborIndex {
    pub fn new(capacity: usize) -> Self {
        TemporalNeighborIndex {
            lists: vec![Vec::new(); capacity],
        }
    }

    pub fn from_dataset(dataset: &Dataset) -> Self {
        let mut index = Self::new(dataset.node_capacity());
        for e in dataset.interactions() {
            index
                .insert(e)
                .expect("dataset interactions are chronologically ordered");
        }
        index
    }

    pub fn insert(&mut self, e: &Interaction) -> Result<()> {
        let mut push = |node: NodeId, partner: NodeId| -> Result<()> {
            let list = self
                .lists
                .get_mut(node.0)
                .ok_or_else(|| Error::Data(format!("node {node} outside the index")))?;
            if list.last().is_some_and(|last| last.timestamp > e.timestamp) {
                return Err(Error::Data(format!(
                    "interaction {} at t={} arrives after later history of node {node}",
                    e.ordinal, e.timestamp
                )));
            }
            list.push(NeighborEntry {
                partner,
                ordinal: e.ordinal,
                timestamp: e.timestamp,
            });
            Ok(())
        };
        push(e.source, e.target)?;
        if e.target != e.source {
            push(e.target, e.source)?;
        }
        Ok(())
    }

    /// Full history of `node`, oldest first.
    pub fn history(&self, node: NodeId) -> &[NeighborEntry] {
        &self.lists[node.0]
    }

    /// Interactions of `node` strictly before `t`.
    pub fn before(&self, node: NodeId, t: f64) -> &[NeighborEntry] {
        let list = &self.lists[node.0];
        let end = list.partition_point(|e| e.timestamp < t);
        &list[..end]
    }

    /// At most `k` neighbors of `node` strictly before `t`, most recent first.
    pub fn query(
        &self,
        node: NodeId,
        t: f64,
        k: usize,
        strategy: SamplingStrategy,
    ) -> Vec<NeighborEntry> {
        let prefix = self.before(node, t);
        if prefix.len() <= k {
            return prefix.iter().rev().copied().collect();
        }
        match strategy {
            SamplingStrategy::MostRecent => prefix[prefix.len() - k..].iter().rev().copied().collect(),
            SamplingStrategy::Uniform { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(query_seed(seed, node, t));
                let mut picked = sample(&mut rng, prefix.len(), k).into_vec();
                picked.sort_unstable_by(|a, b| b.cmp(a));
                picked.into_iter().map(|i| prefix[i]).collect()
            }
        }
    }
}

fn query_seed(seed: u64, node: NodeId, t: f64) -> u64 {
    let mut z = seed ^ (node.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ t.to_bits().rotate_left(29);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(edges: &[(usize, usize, f64)]) -> TemporalNeighborIndex {
        let n = edges.iter().map(|e| e.0.max(e.1)).max().unwrap();
        let ds = Dataset::new(
            "t",
            edges.iter().map(|&(s, d, t)| (s, d, t, None)).collect(),
            Vec::new(),
            0,
            n,
            None,
        )
        .unwrap();
        TemporalNeighborIndex::from_dataset(&ds)
    }

    #[test]
    fn strictly_earlier_most_recent_first() {
        let idx = index(&[(1, 2, 1.0), (1, 3, 2.0), (1, 4, 3.0), (1, 5, 4.0)]);
        let got: Vec<_> = idx
            .query(NodeId(1), 3.5, 2, SamplingStrategy::MostRecent)
            .iter()
            .map(|e| (e.partner.0, e.timestamp))
            .collect();
        assert_eq!(got, vec![(4, 3.0), (3, 2.0)]);
        // an interaction at exactly t is excluded
        let at = idx.query(NodeId(1), 3.0, 5, SamplingStrategy::MostRecent);
        assert!(at.iter().all(|e| e.timestamp < 3.0));
        assert_eq!(at.len(), 2);
    }

    #[test]
    fn empty_history_and_short_history() {
        let idx = index(&[(1, 2, 1.0), (3, 2, 5.0)]);
        assert!(idx.query(NodeId(3), 5.0, 15, SamplingStrategy::MostRecent).is_empty());
        assert_eq!(idx.query(NodeId(2), 10.0, 15, SamplingStrategy::MostRecent).len(), 2);
    }

    #[test]
    fn uniform_is_reproducible_and_causal() {
        let edges: Vec<_> = (0..40).map(|i| (1, 2 + i % 6, i as f64)).collect();
        let idx = index(&edges);
        let s = SamplingStrategy::Uniform { seed: 9 };
        let a = idx.query(NodeId(1), 30.0, 5, s);
        let b = idx.query(NodeId(1), 30.0, 5, s);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|e| e.timestamp < 30.0));
        assert!(a.windows(2).all(|w| w[0].timestamp >= w[1].timestamp));
        let mut ords: Vec<_> = a.iter().map(|e| e.ordinal).collect();
        ords.dedup();
        assert_eq!(ords.len(), 5);
    }

    #[test]
    fn self_loop_recorded_once() {
        let idx = index(&[(1, 1, 1.0)]);
        assert_eq!(idx.history(NodeId(1)).len(), 1);
    }

    #[test]
    fn out_of_order_insert_is_rejected() {
        let mut idx = index(&[(1, 2, 5.0)]);
        let late = Interaction {
            source: NodeId(1),
            target: NodeId(2),
            timestamp: 4.0,
            label: None,
            ordinal: 1,
        };
        assert!(idx.insert(&late).is_err());
    }
}
