use serde::{Deserialize, Serialize};

use super::NodeId;
use crate::error::{Error, Result};

/// Owned copy of one node's memory record.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeMemory {
    pub embedding: Vec<f64>,
    pub partner: NodeId,
    pub timestamp: f64,
    /// Ordinal of the interaction whose message is waiting for this node's
    /// next update.
    pub staged: Option<usize>,
}

/// Per-node embedding, most recent partner, last update time and staged
/// message, stored as flat columns indexed by `NodeId`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    dim: usize,
    embeddings: Vec<f64>,
    partners: Vec<NodeId>,
    timestamps: Vec<f64>,
    staged: Vec<Option<usize>>,
}

impl MemoryStore {
    /// `capacity` includes the sentinel slot 0. Every embedding starts at
    /// zero, every partner at the sentinel, every timestamp at 0.
    pub fn new(capacity: usize, dim: usize) -> Self {
        MemoryStore {
            dim,
            embeddings: vec![0.0; capacity * dim],
            partners: vec![NodeId::NONE; capacity],
            timestamps: vec![0.0; capacity],
            staged: vec![None; capacity],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.partners.len()
    }

    pub fn embedding(&self, node: NodeId) -> &[f64] {
        &self.embeddings[node.0 * self.dim..(node.0 + 1) * self.dim]
    }

    pub fn partner(&self, node: NodeId) -> NodeId {
        self.partners[node.0]
    }

    pub fn timestamp(&self, node: NodeId) -> f64 {
        self.timestamps[node.0]
    }

    pub fn staged(&self, node: NodeId) -> Option<usize> {
        self.staged[node.0]
    }

    pub fn get(&self, node: NodeId) -> NodeMemory {
        NodeMemory {
            embedding: self.embedding(node).to_vec(),
            partner: self.partner(node),
            timestamp: self.timestamp(node),
            staged: self.staged(node),
        }
    }

    /// Overwrites a node's embedding and records its latest partner and time.
    pub fn update_memory(
        &mut self,
        node: NodeId,
        embedding: &[f64],
        partner: NodeId,
        t: f64,
    ) -> Result<()> {
        self.check(node)?;
        if embedding.len() != self.dim {
            return Err(Error::shape(
                "update_memory",
                format!("embedding of length {} for memory width {}", embedding.len(), self.dim),
            ));
        }
        self.touch(node, partner, t)?;
        let d = self.dim;
        self.embeddings[node.0 * d..(node.0 + 1) * d].copy_from_slice(embedding);
        Ok(())
    }

    /// Records partner and time without changing the embedding.
    pub fn touch(&mut self, node: NodeId, partner: NodeId, t: f64) -> Result<()> {
        self.check(node)?;
        let current = self.timestamps[node.0];
        if t < current {
            return Err(Error::TimeRegression {
                node: node.0,
                current,
                requested: t,
            });
        }
        self.partners[node.0] = partner;
        self.timestamps[node.0] = t;
        Ok(())
    }

    pub fn stage(&mut self, node: NodeId, ordinal: usize) -> Result<()> {
        self.check(node)?;
        self.staged[node.0] = Some(ordinal);
        Ok(())
    }

    fn check(&self, node: NodeId) -> Result<()> {
        if node.is_none() || node.0 >= self.capacity() {
            return Err(Error::Data(format!(
                "node {node} is not a writable memory slot (capacity {})",
                self.capacity()
            )));
        }
        Ok(())
    }
}
