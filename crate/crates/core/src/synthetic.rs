//! Seeded bipartite streams with planted periodic user-item affinity.
//!
//! Users and items are split into communities. Every user returns at a
//! roughly fixed period and picks an item of its own community; a fraction
//! of interactions go to uniformly random items instead. With one community
//! per user each user has a dedicated favourite item. An optional cohort of
//! users has a much longer period, which populates the upper interval
//! buckets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub edges: usize,
    pub users: usize,
    pub items: usize,
    pub communities: usize,
    pub mean_period: f64,
    /// Relative spread of each user's period around the mean.
    pub period_spread: f64,
    /// Timing noise as a fraction of the user's period.
    pub jitter: f64,
    /// Probability that an interaction picks a uniformly random item.
    pub noise: f64,
    /// Fraction of users in the long-interval cohort.
    pub long_cohort: f64,
    pub long_factor: f64,
    pub feature_dim: usize,
    /// Marks interactions of long-cohort users with a positive label.
    pub labels: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            edges: 5000,
            users: 100,
            items: 100,
            communities: 100,
            mean_period: 1.0,
            period_spread: 0.5,
            jitter: 0.1,
            noise: 0.1,
            long_cohort: 0.0,
            long_factor: 8.0,
            feature_dim: 4,
            labels: false,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic generator: {m}")));
        if self.users == 0 || self.edges == 0 {
            return bad("users and edges must be positive");
        }
        if self.communities == 0 || self.communities > self.users.min(self.items) {
            return bad("communities must be between 1 and min(users, items)");
        }
        if !(self.mean_period > 0.0 && self.long_factor > 0.0) {
            return bad("periods must be positive");
        }
        if !(0.0..1.0).contains(&self.period_spread) || self.jitter < 0.0 {
            return bad("period spread must lie in [0, 1) and jitter be non-negative");
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.long_cohort) {
            return bad("noise and cohort fractions must lie in [0, 1]");
        }
        Ok(())
    }
}

struct UserProfile {
    period: f64,
    phase: f64,
    long: bool,
}

/// Generates exactly `config.edges` interactions.
pub fn generate(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let long_users = (config.users as f64 * config.long_cohort).round() as usize;
    let profiles: Vec<UserProfile> = (0..config.users)
        .map(|u| {
            let long = u >= config.users - long_users;
            let base = config.mean_period * rng.gen_range(1.0 - config.period_spread..=1.0 + config.period_spread);
            let period = if long { base * config.long_factor } else { base };
            UserProfile {
                period,
                phase: rng.gen_range(0.0..period),
                long,
            }
        })
        .collect();

    let rate: f64 = profiles.iter().map(|p| 1.0 / p.period).sum();
    let mut horizon = config.edges as f64 / rate * 1.1 + config.mean_period * config.long_factor;
    let events = loop {
        let mut gen = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5_A5A5);
        let mut events: Vec<(f64, usize, usize)> = Vec::new();
        for (u, p) in profiles.iter().enumerate() {
            let jitter = Normal::new(0.0, config.jitter * p.period).map_err(|e| Error::Config(e.to_string()))?;
            let mut k = 0usize;
            loop {
                let t = p.phase + k as f64 * p.period + jitter.sample(&mut gen);
                if p.phase + k as f64 * p.period > horizon {
                    break;
                }
                let item = if gen.gen::<f64>() < config.noise {
                    gen.gen_range(0..config.items)
                } else {
                    let c = community(u, config.users, config.communities);
                    let (lo, hi) = (members(c, config.items, config.communities), members(c + 1, config.items, config.communities));
                    gen.gen_range(lo..hi)
                };
                events.push((t.max(0.0), u, item));
                k += 1;
            }
        }
        if events.len() >= config.edges {
            break events;
        }
        horizon *= 1.5;
    };
    let mut events = events;
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    events.truncate(config.edges);

    let t0 = events[0].0;
    let users = config.users;
    let feature = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(events.len() * config.feature_dim);
    let edges = events
        .iter()
        .map(|&(t, u, i)| {
            for _ in 0..config.feature_dim {
                features.push(feature.sample(&mut rng));
            }
            let label = config.labels.then_some(profiles[u].long);
            (u + 1, users + i + 1, t - t0, label)
        })
        .collect();
    Dataset::new(
        format!("synthetic-{}", config.seed),
        edges,
        features,
        config.feature_dim,
        users + config.items,
        Some(users),
    )
}

/// Community of member `index` out of `count`.
fn community(index: usize, count: usize, communities: usize) -> usize {
    index * communities / count
}

/// First member of community `c` out of `count`.
fn members(c: usize, count: usize, communities: usize) -> usize {
    (c * count).div_ceil(communities)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_edge_count_and_order() {
        let ds = generate(&SyntheticConfig {
            edges: 777,
            long_cohort: 0.2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert_eq!(ds.len(), 777);
        assert!(ds.interactions().windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert_eq!(ds.interactions()[0].timestamp, 0.0);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.users(), Some(100));
    }

    #[test]
    fn seeded() {
        let cfg = SyntheticConfig {
            edges: 300,
            ..SyntheticConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = generate(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(other, generate(&SyntheticConfig { seed: 0, edges: 300, ..SyntheticConfig::default() }).unwrap());
    }

    #[test]
    fn items_stay_in_community_without_noise() {
        for communities in [100, 7] {
        let cfg = SyntheticConfig {
            edges: 1000,
            noise: 0.0,
            items: 60,
            communities: communities.min(60),
            ..SyntheticConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for e in ds.interactions() {
            let u = e.source.0 - 1;
            let item = e.target.0 - cfg.users - 1;
            assert_eq!(community(item, cfg.items, cfg.communities), community(u, cfg.users, cfg.communities));
        }
        }
    }

    #[test]
    fn community_ranges_partition_members() {
        for (count, communities) in [(100, 7), (60, 60), (10, 3)] {
            for i in 0..count {
                let c = community(i, count, communities);
                assert!(members(c, count, communities) <= i && i < members(c + 1, count, communities));
            }
        }
    }

    #[test]
    fn long_cohort_has_longer_gaps() {
        let cfg = SyntheticConfig {
            edges: 3000,
            long_cohort: 0.2,
            labels: true,
            ..SyntheticConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let mut last = vec![None; ds.node_capacity()];
        let (mut long, mut short) = (Vec::new(), Vec::new());
        for e in ds.interactions() {
            if let Some(t) = last[e.source.0] {
                let gap: f64 = e.timestamp - t;
                if e.label == Some(true) { long.push(gap) } else { short.push(gap) }
            }
            last[e.source.0] = Some(e.timestamp);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&long) > 4.0 * mean(&short));
    }
}
