//! Evaluation protocols over a trained checkpoint.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{AdamConfig, AdamState, ParamStore, Tape};
use crate::config::{ClassifyConfig, Config};
use crate::decoder::Mlp;
use crate::error::{Error, Result};
use crate::graph::{chronological_split, interaction_intervals, Dataset, Interaction, MemoryStore, NodeId, Split};
use crate::metrics::{average_precision, pessimistic_rank, recall_at_k, roc_auc, IntervalBuckets, BUCKETS};
use crate::model::{ContigModel, StreamContext};
use crate::tensor::Tensor;
use crate::train::{derive_seed, sample_negatives, Checkpoint};
use crate::update::commit_update;

/// Mixed into the seed of every evaluation negative stream.
pub const EVAL_SALT: u64 = 0x5EED_E7A1_0000_0001;

pub const RECALL_KS: [usize; 4] = [5, 10, 15, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkMode {
    Transductive,
    Inductive,
}

impl LinkMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkMode::Transductive => "transductive",
            LinkMode::Inductive => "inductive",
        }
    }
}

impl std::str::FromStr for LinkMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transductive" => Ok(LinkMode::Transductive),
            "inductive" => Ok(LinkMode::Inductive),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}, expected transductive or inductive"
            ))),
        }
    }
}

/// True-edge and paired-negative logits for the scored interactions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkScores {
    pub ordinals: Vec<usize>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl LinkScores {
    /// Positive then negative for each scored interaction.
    pub fn predictions(&self, members: impl IntoIterator<Item = usize>) -> Vec<(f64, bool)> {
        members
            .into_iter()
            .flat_map(|j| [(self.positive[j], true), (self.negative[j], false)])
            .collect()
    }
}

pub fn link_metrics(scores: &LinkScores) -> Result<(f64, f64)> {
    let preds = scores.predictions(0..scores.positive.len());
    Ok((average_precision(&preds)?, roc_auc(&preds)?))
}

/// Streams `range` from `memory` without gradient steps. Interactions that
/// pass `filter` are scored against one uniform negative destination before
/// the memory absorbs them.
pub fn stream_link_scores(
    model: &ContigModel,
    ctx: &StreamContext,
    memory: &mut MemoryStore,
    range: Range<usize>,
    batch_size: usize,
    filter: impl Fn(&Interaction) -> bool,
    rng: &mut ChaCha8Rng,
) -> Result<LinkScores> {
    let mut out = LinkScores::default();
    for batch in ctx.events(range).chunks(batch_size.max(1)) {
        let mut tape = Tape::inference();
        let update = model.run_update(&mut tape, memory, ctx.dataset, batch)?;
        let positions: Vec<usize> = (0..batch.len()).filter(|&p| filter(&batch[p])).collect();
        if !positions.is_empty() {
            let negatives = sample_negatives(&ctx.destinations, positions.len(), rng)?;
            let (pos, neg) =
                model.score_batch(&mut tape, ctx, memory, &update, batch, &positions, &negatives)?;
            out.ordinals.extend(positions.iter().map(|&p| batch[p].ordinal));
            out.positive.extend_from_slice(tape.value(pos).data());
            out.negative.extend_from_slice(tape.value(neg.expect("one negative per position")).data());
        }
        commit_update(memory, &tape, &update, batch)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinkReport {
    pub mode: &'static str,
    pub ap: f64,
    pub auc: f64,
    pub events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub auc: f64,
    pub train_events: usize,
    pub test_events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketReport {
    pub cuts: [f64; BUCKETS - 1],
    pub sizes: [usize; BUCKETS],
    /// AP per bucket; NaN for an empty bucket.
    pub ap: [f64; BUCKETS],
}

/// A frozen model plus the stream it was trained on.
pub struct Evaluator<'a> {
    model: ContigModel,
    config: Config,
    checkpoint_memory: MemoryStore,
    cursor: usize,
    ctx: StreamContext<'a>,
    split: Split,
}

impl<'a> Evaluator<'a> {
    pub fn new(checkpoint: &Checkpoint, dataset: &'a Dataset) -> Result<Self> {
        let config = checkpoint.config()?;
        let model = checkpoint.model()?;
        if dataset.feature_dim() != model.feature_dim() {
            return Err(Error::Data(format!(
                "dataset has {} edge features, checkpoint expects {}",
                dataset.feature_dim(),
                model.feature_dim()
            )));
        }
        let split = chronological_split(dataset, config.data.fractions())?;
        let consistent = checkpoint.memory.capacity() == dataset.node_capacity()
            && checkpoint.memory.dim() == config.model.dim
            && checkpoint.cursor <= dataset.len();
        Ok(Evaluator {
            model,
            // a checkpoint from a different stream is replayed from scratch
            checkpoint_memory: if consistent {
                checkpoint.memory.clone()
            } else {
                MemoryStore::new(dataset.node_capacity(), config.model.dim)
            },
            cursor: if consistent { checkpoint.cursor } else { 0 },
            config,
            ctx: StreamContext::new(dataset),
            split,
        })
    }

    pub fn model(&self) -> &ContigModel {
        &self.model
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ctx.dataset
    }

    fn batch_size(&self) -> usize {
        self.config.train.batch_size
    }

    fn rng(&self, task: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.config.train.seed ^ EVAL_SALT, task, 0))
    }

    /// Memory after absorbing every interaction before `start`.
    pub fn memory_at(&self, start: usize) -> Result<MemoryStore> {
        let (mut memory, from) = if start >= self.cursor {
            (self.checkpoint_memory.clone(), self.cursor)
        } else {
            (self.model.new_memory(self.ctx.dataset.node_capacity()), 0)
        };
        for batch in self.ctx.events(from..start).chunks(self.batch_size()) {
            self.model.advance(&mut memory, self.ctx.dataset, batch)?;
        }
        Ok(memory)
    }

    pub fn link_scores(&self, range: Range<usize>, mode: LinkMode) -> Result<LinkScores> {
        let mut memory = self.memory_at(range.start)?;
        let mut rng = self.rng(1);
        let split = &self.split;
        let scores = stream_link_scores(
            &self.model,
            &self.ctx,
            &mut memory,
            range,
            self.batch_size(),
            |e| mode == LinkMode::Transductive || split.is_new(e.source) || split.is_new(e.target),
            &mut rng,
        )?;
        if scores.positive.is_empty() {
            return Err(Error::Unsupported(format!(
                "no {} interactions to evaluate",
                mode.as_str()
            )));
        }
        Ok(scores)
    }

    pub fn link_prediction(&self, range: Range<usize>, mode: LinkMode) -> Result<LinkReport> {
        let scores = self.link_scores(range, mode)?;
        let (ap, auc) = link_metrics(&scores)?;
        Ok(LinkReport {
            mode: mode.as_str(),
            ap,
            auc,
            events: scores.positive.len(),
        })
    }

    /// Ranks every item for each interaction's user and reports the fraction
    /// of interactions whose true item lands in the top `k`.
    pub fn recommendation(&self, range: Range<usize>, ks: &[usize]) -> Result<RecallReport> {
        let dataset = self.ctx.dataset;
        if !dataset.is_bipartite() {
            return Err(Error::Unsupported(
                "recommendation needs a bipartite user-item stream".into(),
            ));
        }
        let items = &self.ctx.destinations;
        let mut item_slot = vec![usize::MAX; dataset.node_capacity()];
        for (j, item) in items.iter().enumerate() {
            item_slot[item.0] = j;
        }
        let mut memory = self.memory_at(range.start)?;
        let mut ranks = Vec::new();
        for batch in self.ctx.events(range).chunks(self.batch_size()) {
            let mut tape = Tape::inference();
            let update = self.model.run_update(&mut tape, &memory, dataset, batch)?;
            for p in 0..batch.len() {
                let (_, all) = self.model.score_batch(
                    &mut tape,
                    &self.ctx,
                    &memory,
                    &update,
                    batch,
                    &[p],
                    items,
                )?;
                let scores = tape.value(all.expect("items are non-empty")).data();
                ranks.push(pessimistic_rank(scores, item_slot[batch[p].target.0]));
            }
            commit_update(&mut memory, &tape, &update, batch)?;
        }
        Ok(RecallReport {
            ks: ks.to_vec(),
            recall: ks.iter().map(|&k| recall_at_k(&ranks, k)).collect(),
            events: ranks.len(),
        })
    }

    /// Source-node future embeddings at every labelled interaction, streamed
    /// from empty memory over the whole dataset.
    pub fn labelled_embeddings(&self) -> Result<Vec<(usize, Vec<f64>, bool)>> {
        let dataset = self.ctx.dataset;
        let mut memory = self.model.new_memory(dataset.node_capacity());
        let mut out = Vec::new();
        for batch in self.ctx.events(0..dataset.len()).chunks(self.batch_size()) {
            let mut tape = Tape::inference();
            let update = self.model.run_update(&mut tape, &memory, dataset, batch)?;
            let labelled: Vec<(NodeId, usize)> = (0..batch.len())
                .filter(|&p| batch[p].label.is_some())
                .map(|p| (batch[p].source, p))
                .collect();
            if !labelled.is_empty() {
                let h = self
                    .model
                    .embed(&mut tape, &self.ctx, &memory, &update, batch, &labelled, true)?;
                let values = tape.value(h);
                for (r, &(_, p)) in labelled.iter().enumerate() {
                    out.push((batch[p].ordinal, values.row(r).to_vec(), batch[p].label.unwrap()));
                }
            }
            commit_update(&mut memory, &tape, &update, batch)?;
        }
        Ok(out)
    }

    /// Trains a post-hoc classifier on train-range embeddings and reports its
    /// test-range AUC. The embedding model is not modified.
    pub fn node_classification(&self) -> Result<ClassificationReport> {
        if !self.ctx.dataset.has_labels() {
            return Err(Error::Unsupported("dataset carries no dynamic labels".into()));
        }
        let rows = self.labelled_embeddings()?;
        let pick = |range: &Range<usize>| -> (Vec<Vec<f64>>, Vec<bool>) {
            rows.iter()
                .filter(|r| range.contains(&r.0))
                .map(|r| (r.1.clone(), r.2))
                .unzip()
        };
        let (train_x, train_y) = pick(&self.split.train);
        let (test_x, test_y) = pick(&self.split.test);
        let classifier = Classifier::fit(&train_x, &train_y, &self.config.classify, self.config.train.seed)?;
        let preds: Vec<(f64, bool)> = classifier.predict(&test_x)?.into_iter().zip(test_y.iter().copied()).collect();
        Ok(ClassificationReport {
            auc: roc_auc(&preds)?,
            train_events: train_y.len(),
            test_events: test_y.len(),
        })
    }

    pub fn interval_buckets(&self, range: Range<usize>) -> Result<BucketReport> {
        let scores = self.link_scores(range, LinkMode::Transductive)?;
        let all = interaction_intervals(self.ctx.dataset);
        let intervals: Vec<f64> = scores.ordinals.iter().map(|&o| all[o]).collect();
        let buckets = IntervalBuckets::new(&intervals);
        let mut ap = [f64::NAN; BUCKETS];
        for (b, members) in buckets.members.iter().enumerate() {
            if !members.is_empty() {
                ap[b] = average_precision(&scores.predictions(members.iter().copied()))?;
            }
        }
        Ok(BucketReport {
            cuts: buckets.cuts,
            sizes: std::array::from_fn(|b| buckets.members[b].len()),
            ap,
        })
    }
}

/// Feed-forward binary classifier over fixed embeddings.
pub struct Classifier {
    store: ParamStore,
    mlp: Mlp,
}

impl Classifier {
    pub fn fit(x: &[Vec<f64>], y: &[bool], config: &ClassifyConfig, seed: u64) -> Result<Self> {
        let positives = y.iter().filter(|&&l| l).count();
        if positives == 0 || positives == y.len() {
            return Err(Error::Data(format!(
                "classifier training range is degenerate: {positives} positive of {}",
                y.len()
            )));
        }
        let dim = x[0].len();
        let mut widths = vec![dim];
        widths.extend_from_slice(&config.hidden);
        widths.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 11, 0));
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "classifier", &widths, &mut rng);
        let mut adam = AdamState::for_store(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &store,
        );
        let mut order: Vec<usize> = (0..y.len()).collect();
        let mut step = 0u64;
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size.max(1)) {
                let mut tape = Tape::training(derive_seed(seed, 12, step));
                step += 1;
                let input = tape.constant(stack(chunk.iter().map(|&i| &x[i]), dim)?);
                let logits = mlp.forward(&mut tape, &store, input, config.dropout)?;
                let signs: Vec<f64> = chunk.iter().map(|&i| if y[i] { 1.0 } else { -1.0 }).collect();
                let signs = tape.constant(Tensor::matrix(chunk.len(), 1, signs)?);
                let signed = tape.mul(logits, signs)?;
                let log_lik = tape.log_sigmoid(signed)?;
                let mean = tape.mean(log_lik)?;
                let loss = tape.scale(mean, -1.0)?;
                let grads = tape.backward(loss)?;
                store.zero_grad();
                store.accumulate(&grads);
                adam.step_store(&mut store)?;
            }
        }
        Ok(Classifier { store, mlp })
    }

    /// Logits, one per row.
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::inference();
        let input = tape.constant(stack(x.iter(), x[0].len())?);
        let out = self.mlp.forward(&mut tape, &self.store, input, 0.0)?;
        Ok(tape.value(out).data().to_vec())
    }
}

fn stack<'v>(rows: impl Iterator<Item = &'v Vec<f64>>, dim: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::matrix(n, dim, data)
}

/// One line of the results file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub metric: String,
    pub dataset: String,
    pub mode: String,
    pub value: f64,
    pub seed: u64,
    pub config_fingerprint: String,
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per interval bucket: index, interval range, size and AP.
pub fn write_bucket_csv(path: &Path, report: &BucketReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["bucket", "lower", "upper", "count", "ap"])
        .map_err(|e| csv_error(path, e))?;
    for b in 0..BUCKETS {
        let lower = if b == 0 { f64::NEG_INFINITY } else { report.cuts[b - 1] };
        let upper = if b == BUCKETS - 1 { f64::INFINITY } else { report.cuts[b] };
        w.write_record([
            b.to_string(),
            lower.to_string(),
            upper.to_string(),
            report.sizes[b].to_string(),
            report.ap[b].to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests;
