//! Chronological training loop, early stopping and checkpoints.

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, ParamFile, ParamStore, Tape, Var};
use crate::config::{Config, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{link_metrics, stream_link_scores, EVAL_SALT};
use crate::graph::{chronological_split, Dataset, Interaction, MemoryStore, NodeId, Split};
use crate::model::{ContigModel, StreamContext};
use crate::update::commit_update;

pub const CHECKPOINT_FORMAT: &str = "contig-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `count` destinations drawn uniformly with replacement.
pub fn sample_negatives(space: &[NodeId], count: usize, rng: &mut impl Rng) -> Result<Vec<NodeId>> {
    if space.is_empty() {
        return Err(Error::Data("negative sampling space is empty".into()));
    }
    Ok((0..count).map(|_| space[rng.gen_range(0..space.len())]).collect())
}

/// Binary cross-entropy over positive and negative logits, normalized by the
/// number of positives. `negate_positive` feeds the positives through
/// `σ(-s)` as well.
pub fn bce_link_loss(tape: &mut Tape, positive: Var, negative: Var, negate_positive: bool) -> Result<Var> {
    let b = tape.value(positive).numel();
    if b == 0 {
        return Err(Error::shape("bce_link_loss", "no positive logits"));
    }
    let pos = if negate_positive {
        tape.scale(positive, -1.0)?
    } else {
        positive
    };
    let lp = tape.log_sigmoid(pos)?;
    let neg = tape.scale(negative, -1.0)?;
    let ln = tape.log_sigmoid(neg)?;
    let sp = tape.sum(lp)?;
    let sn = tape.sum(ln)?;
    let total = tape.add(sp, sn)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Splitmix-style derivation of independent stream seeds.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const NEGATIVE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// One optimizer step on a chronological batch; memory advances with the
/// batch. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_batch(
    model: &mut ContigModel,
    adam: &mut AdamState,
    ctx: &StreamContext,
    memory: &mut MemoryStore,
    events: &[Interaction],
    config: &TrainConfig,
    negatives_rng: &mut impl Rng,
    dropout_seed: u64,
) -> Result<f64> {
    let negatives = sample_negatives(&ctx.destinations, events.len() * config.negatives, negatives_rng)?;
    let mut tape = Tape::training(dropout_seed);
    let update = model.run_update(&mut tape, memory, ctx.dataset, events)?;
    let positions: Vec<usize> = (0..events.len()).collect();
    let (pos, neg) = model.score_batch(&mut tape, ctx, memory, &update, events, &positions, &negatives)?;
    let neg = neg.ok_or_else(|| Error::shape("train_batch", "no negative logits"))?;
    let loss = bce_link_loss(&mut tape, pos, neg, config.negate_positive_loss)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "bce_link_loss" });
    }
    commit_update(memory, &tape, &update, events)?;
    let grads = tape.backward(loss)?;
    let store = model.store_mut();
    store.zero_grad();
    store.accumulate(&grads);
    adam.step_store(store)?;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub first_loss: f64,
    pub batches: usize,
}

/// Streams `range` in chronological batches from `memory`, stepping the
/// optimizer once per batch.
pub fn train_epoch(
    model: &mut ContigModel,
    adam: &mut AdamState,
    ctx: &StreamContext,
    memory: &mut MemoryStore,
    range: Range<usize>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, NEGATIVE_STREAM, epoch as u64));
    let events = ctx.events(range);
    let mut total = 0.0;
    let mut first = f64::NAN;
    let mut batches = 0;
    for (b, batch) in events.chunks(config.batch_size.max(1)).enumerate() {
        let seed = derive_seed(config.seed, DROPOUT_STREAM, ((epoch as u64) << 32) | b as u64);
        let loss = train_batch(model, adam, ctx, memory, batch, config, &mut rng, seed)?;
        if batches == 0 {
            first = loss;
        }
        total += loss;
        batches += 1;
    }
    Ok(EpochStats {
        mean_loss: if batches > 0 { total / batches as f64 } else { f64::NAN },
        first_loss: first,
        batches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_ap: f64,
    pub val_auc: f64,
    pub seconds: f64,
    pub improved: bool,
}

pub struct FitOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub split: Split,
}

/// Trains on the chronological train range, scoring validation AP after
/// every epoch, and keeps the best epoch. Memory is re-initialized and the
/// train range replayed at the start of each epoch.
pub fn fit(dataset: &Dataset, config: &Config, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<FitOutcome> {
    config.validate()?;
    let split = chronological_split(dataset, config.data.fractions())?;
    let mut model = ContigModel::for_dataset(&config.model, dataset, config.train.seed)?;
    let mut adam = AdamState::for_store(
        AdamConfig {
            lr: config.train.lr,
            ..AdamConfig::default()
        },
        model.store(),
    );
    let ctx = StreamContext::new(dataset);
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 0..config.train.epochs {
        let started = Instant::now();
        let mut memory = model.new_memory(dataset.node_capacity());
        let stats = train_epoch(&mut model, &mut adam, &ctx, &mut memory, split.train.clone(), &config.train, epoch)?;
        let mut val_memory = memory.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ EVAL_SALT);
        let scores = stream_link_scores(
            &model,
            &ctx,
            &mut val_memory,
            split.val.clone(),
            config.train.batch_size,
            |_| true,
            &mut rng,
        )?;
        let (val_ap, val_auc) = link_metrics(&scores)?;
        let improved = best.as_ref().is_none_or(|b| val_ap > b.val_ap);
        if improved {
            stale = 0;
            best = Some(Checkpoint::capture(config, dataset, &model, &adam, &memory, split.train.end, epoch, val_ap));
        } else {
            stale += 1;
        }
        let record = EpochRecord {
            epoch,
            loss: stats.mean_loss,
            val_ap,
            val_auc,
            seconds: started.elapsed().as_secs_f64(),
            improved,
        };
        on_epoch(&record);
        history.push(record);
        if stale >= config.train.patience {
            break;
        }
    }
    let best = best.ok_or_else(|| Error::Config("train.epochs must be at least 1".into()))?;
    Ok(FitOutcome { best, history, split })
}

/// Everything needed to resume evaluation: parameters, optimizer state and
/// the memory at the end of the train range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub engine: String,
    /// Canonical `key=value` config text.
    pub config: String,
    pub fingerprint: String,
    pub dataset: String,
    pub feature_dim: usize,
    pub max_time: f64,
    pub epoch: usize,
    pub val_ap: f64,
    /// Number of interactions `memory` has absorbed.
    pub cursor: usize,
    pub params: ParamFile,
    pub optimizer: AdamState,
    pub memory: MemoryStore,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn capture(
        config: &Config,
        dataset: &Dataset,
        model: &ContigModel,
        adam: &AdamState,
        memory: &MemoryStore,
        cursor: usize,
        epoch: usize,
        val_ap: f64,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            engine: crate::VERSION.into(),
            config: config.canonical(),
            fingerprint: config.fingerprint(),
            dataset: dataset.name().into(),
            feature_dim: model.feature_dim(),
            max_time: model.max_time(),
            epoch,
            val_ap,
            cursor,
            params: model.store().to_file(),
            optimizer: adam.clone(),
            memory: memory.clone(),
        }
    }

    pub fn config(&self) -> Result<Config> {
        let mut config = Config::default();
        for line in self.config.lines().filter(|l| !l.trim().is_empty()) {
            config
                .apply_override(line)
                .map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
        }
        if config.fingerprint() != self.fingerprint {
            return Err(Error::Checkpoint("config fingerprint mismatch".into()));
        }
        Ok(config)
    }

    pub fn model(&self) -> Result<ContigModel> {
        let config = self.config()?;
        let mut model = ContigModel::new(&config.model, self.feature_dim, self.max_time, config.train.seed)?;
        let store = ParamStore::from_file(&self.params)?;
        model.load_store(store)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
