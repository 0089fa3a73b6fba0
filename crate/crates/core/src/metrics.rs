//! Ranking metrics and interval bucketing.

use crate::error::{Error, Result};

/// Average precision over `(score, label)` pairs. Pairs are visited in
/// descending score order; equal scores keep their input order.
pub fn average_precision(predictions: &[(f64, bool)]) -> Result<f64> {
    let positives = predictions.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(Error::Data("average precision needs at least one positive".into()));
    }
    let order = descending_order(predictions);
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if predictions[i].1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// ROC AUC in Mann-Whitney form, ties counting one half.
pub fn roc_auc(predictions: &[(f64, bool)]) -> Result<f64> {
    let positives = predictions.iter().filter(|p| p.1).count();
    let negatives = predictions.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Data(format!(
            "AUC needs both classes, got {positives} positive and {negatives} negative"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = predictions.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of positive midranks
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        let pos_in_group = sorted[i..j].iter().filter(|p| p.1).count();
        rank_sum += mid * pos_in_group as f64;
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Rank of candidate `truth` among `scores`, 1-based, placing it after every
/// other candidate with an equal or higher score.
pub fn pessimistic_rank(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j != truth && v >= s)
        .count()
}

/// Fraction of ranks at or below `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

fn descending_order(predictions: &[(f64, bool)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].0.total_cmp(&predictions[a].0));
    order
}

pub const BUCKETS: usize = 5;

/// Five equal-size sets of interactions ordered by interval.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalBuckets {
    /// Interpolated 20/40/60/80% quantiles of the intervals.
    pub cuts: [f64; BUCKETS - 1],
    /// Item indices (into the input slice) of each bucket.
    pub members: [Vec<usize>; BUCKETS],
}

impl IntervalBuckets {
    /// Sorts by interval (stable, so equal intervals keep input order) and
    /// splits the ranks at `floor(n * b / 5)`. Equal intervals straddling a
    /// boundary are therefore split by position.
    pub fn new(intervals: &[f64]) -> Self {
        let n = intervals.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| intervals[a].total_cmp(&intervals[b]));
        let sorted: Vec<f64> = order.iter().map(|&i| intervals[i]).collect();
        let bounds: Vec<usize> = (0..=BUCKETS).map(|b| n * b / BUCKETS).collect();
        let members = std::array::from_fn(|b| order[bounds[b]..bounds[b + 1]].to_vec());
        let cuts = std::array::from_fn(|c| quantile(&sorted, (c + 1) as f64 / BUCKETS as f64));
        IntervalBuckets { cuts, members }
    }

    /// Bucket of each input item.
    pub fn assignment(&self, len: usize) -> Vec<usize> {
        let mut out = vec![0; len];
        for (b, m) in self.members.iter().enumerate() {
            for &i in m {
                out[i] = b;
            }
        }
        out
    }
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}
