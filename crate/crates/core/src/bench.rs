//! Epoch timing over stream prefixes.

use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{AdamConfig, AdamState};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::Dataset;
use crate::model::{ContigModel, StreamContext};
use crate::train::train_epoch;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub edges: usize,
    pub seconds: f64,
}

/// Wall time of one training epoch on each prefix of `dataset`. Each prefix
/// trains a freshly initialized model from empty memory.
pub fn time_epochs(dataset: &Dataset, config: &Config, counts: &[usize]) -> Result<Vec<BenchRow>> {
    config.validate()?;
    if counts.is_empty() || counts.windows(2).any(|w| w[0] >= w[1]) || counts[0] == 0 {
        return Err(Error::Config(format!("edge counts {counts:?} must be positive and strictly ascending")));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &n in counts {
        let prefix = dataset.prefix(n)?;
        let mut model = ContigModel::for_dataset(&config.model, &prefix, config.train.seed)?;
        let mut adam = AdamState::for_store(
            AdamConfig {
                lr: config.train.lr,
                ..AdamConfig::default()
            },
            model.store(),
        );
        let ctx = StreamContext::new(&prefix);
        let mut memory = model.new_memory(prefix.node_capacity());
        let started = Instant::now();
        train_epoch(&mut model, &mut adam, &ctx, &mut memory, 0..n, &config.train, 0)?;
        rows.push(BenchRow {
            edges: n,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

/// Least-squares line through `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(Error::Data("a linear fit needs at least two points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("a linear fit needs at least two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

pub fn bench_fit(rows: &[BenchRow]) -> Result<LinearFit> {
    linear_fit(&rows.iter().map(|r| (r.edges as f64, r.seconds)).collect::<Vec<_>>())
}
