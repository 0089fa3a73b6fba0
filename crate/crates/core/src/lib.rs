//! Temporal interaction graph embedding with a continuous-time memory update
//! and temporal graph attention.
//!
//! The engine consumes a chronologically ordered stream of attributed edges
//! `(source, target, time, features)`. For every batch it
//!
//! 1. encodes each endpoint's previously staged interaction into an initial
//!    state, couples endpoints with their latest partners through a
//!    regularized adjacency and integrates a gated affine ODE
//!    ([`update`]);
//! 2. attends over up to `k` strictly earlier neighbors to produce a future
//!    embedding ([`transform`]);
//! 3. scores candidate links with a decoder and trains everything end to end
//!    through the built-in reverse-mode differentiation in [`autodiff`].

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod sparse;
pub mod synthetic;
pub mod tensor;
pub mod time_encoding;
pub mod train;
pub mod transform;
pub mod update;

pub use config::Config;
pub use error::{Error, ErrorClass, Result};
pub use graph::{Dataset, Interaction, NodeId};
pub use model::ContigModel;
pub use tensor::Tensor;

/// Engine version recorded in manifests and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
