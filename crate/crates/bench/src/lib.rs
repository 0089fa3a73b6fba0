//! Benchmark fixtures shared by the criterion targets in `benches/`.

use contig_core::synthetic::{generate, SyntheticConfig};
use contig_core::{Config, Dataset};

/// Synthetic stream with enough users that prefixes stay representative.
pub fn stream(edges: usize) -> Dataset {
    generate(&SyntheticConfig {
        edges,
        users: 400,
        items: 400,
        communities: 400,
        ..SyntheticConfig::default()
    })
    .expect("valid synthetic config")
}

/// The d = 32 model used by the acceptance benchmark.
pub fn small_config() -> Config {
    let mut c = Config::default();
    for kv in ["model.dim=32", "model.time_dim=32", "attention.neighbors=10"] {
        c.apply_override(kv).expect("valid override");
    }
    c
}
