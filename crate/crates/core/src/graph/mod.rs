//! Edge-stream ingestion, per-node memory, the temporal neighbor index and
//! chronological splits.

mod dataset;
mod memory;
mod neighbors;

pub use dataset::{
    chronological_split, interaction_interval, interaction_intervals, load_stream, Dataset,
    Interaction, LoadOptions, NodeId, Split,
};
pub use memory::{MemoryStore, NodeMemory};
pub use neighbors::{NeighborEntry, SamplingStrategy, TemporalNeighborIndex};
