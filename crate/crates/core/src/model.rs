//! The assembled embedding model: memory update, temporal attention and
//! link decoder over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::config::{ModelConfig, NeighborStrategy};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::graph::{Dataset, Interaction, MemoryStore, NodeId, SamplingStrategy, TemporalNeighborIndex};
use crate::tensor::Tensor;
use crate::time_encoding::TimeEncoder;
use crate::transform::{AttentionParams, NeighborInputs};
use crate::update::{commit_update, run_update, GatedOdeDynamics, MessageEncoder, UpdateModule, UpdateOutput};

/// A dataset together with its neighbor index and negative-sampling space.
pub struct StreamContext<'a> {
    pub dataset: &'a Dataset,
    pub index: TemporalNeighborIndex,
    pub destinations: Vec<NodeId>,
}

impl<'a> StreamContext<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        StreamContext {
            dataset,
            index: TemporalNeighborIndex::from_dataset(dataset),
            destinations: dataset.destination_nodes(),
        }
    }

    pub fn events(&self, range: std::ops::Range<usize>) -> &'a [Interaction] {
        &self.dataset.interactions()[range]
    }
}

#[derive(Clone, Debug)]
pub struct ContigModel {
    config: ModelConfig,
    store: ParamStore,
    time: TimeEncoder,
    attention_time: Option<TimeEncoder>,
    update: UpdateModule,
    attention: AttentionParams,
    decoder: Decoder,
    feature_dim: usize,
    max_time: f64,
}

impl ContigModel {
    /// Builds a freshly initialized model. Initialization draws from a
    /// generator seeded by `seed`; `max_time` sets the frequency ladder.
    pub fn new(config: &ModelConfig, feature_dim: usize, max_time: f64, seed: u64) -> Result<Self> {
        if config.time_dim == 0 || config.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time width {} must be even", config.time_dim)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let half = config.time_dim / 2;
        let time = TimeEncoder::new(&mut store, "time", half, max_time)?;
        let attention_time = if config.shared_time_encoder {
            None
        } else {
            Some(TimeEncoder::new(&mut store, "attention.time", half, max_time)?)
        };
        let encoder = MessageEncoder::new(&mut store, "update.encoder", config.dim, feature_dim, config.time_dim, &mut rng);
        let dynamics = GatedOdeDynamics::new(&mut store, "update.ode", config, &mut rng);
        let strategy = match config.strategy {
            NeighborStrategy::MostRecent => SamplingStrategy::MostRecent,
            NeighborStrategy::Uniform => SamplingStrategy::Uniform { seed },
        };
        let attention = AttentionParams::new(
            &mut store,
            "attention",
            config.dim,
            config.heads,
            feature_dim,
            config.time_dim,
            config.neighbors,
            strategy,
            config.query_time,
            config.dropout,
            &mut rng,
        )?;
        let decoder = Decoder::new(config.decoder, &mut store, "decoder", config.dim, &mut rng);
        Ok(ContigModel {
            config: config.clone(),
            store,
            time,
            attention_time,
            update: UpdateModule { encoder, dynamics },
            attention,
            decoder,
            feature_dim,
            max_time,
        })
    }

    pub fn for_dataset(config: &ModelConfig, dataset: &Dataset, seed: u64) -> Result<Self> {
        ContigModel::new(config, dataset.feature_dim(), dataset.max_timestamp(), seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn max_time(&self) -> f64 {
        self.max_time
    }

    pub fn time_encoder(&self) -> &TimeEncoder {
        &self.time
    }

    pub fn attention_time_encoder(&self) -> &TimeEncoder {
        self.attention_time.as_ref().unwrap_or(&self.time)
    }

    pub fn update_module(&self) -> &UpdateModule {
        &self.update
    }

    pub fn attention(&self) -> &AttentionParams {
        &self.attention
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn new_memory(&self, capacity: usize) -> MemoryStore {
        MemoryStore::new(capacity, self.config.dim)
    }

    /// SHA-256 over every parameter's name, shape and value bits.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter() {
            h.update(p.name.as_bytes());
            for &s in p.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.feature_dim() != self.feature_dim {
            return Err(Error::Data(format!(
                "dataset has {} edge features, model expects {}",
                dataset.feature_dim(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Runs the update module over a batch (memory is not modified).
    pub fn run_update(
        &self,
        tape: &mut Tape,
        memory: &MemoryStore,
        dataset: &Dataset,
        events: &[Interaction],
    ) -> Result<UpdateOutput> {
        self.check_dataset(dataset)?;
        run_update(
            tape,
            &self.store,
            &self.update,
            &self.time,
            memory,
            dataset,
            events,
            &self.config.ablation,
        )
    }

    /// Future embeddings for `(node, batch position)` queries, each taken at
    /// the time of the interaction at that position. Memory embeddings follow
    /// [`UpdateOutput::visible_row`]: unless `detached`, the query node's own
    /// row carries gradients into the update module. Neighbor rows are always
    /// read as values.
    #[allow(clippy::too_many_arguments)]
    pub fn embed(
        &self,
        tape: &mut Tape,
        ctx: &StreamContext,
        memory: &MemoryStore,
        update: &UpdateOutput,
        events: &[Interaction],
        queries: &[(NodeId, usize)],
        detached: bool,
    ) -> Result<Var> {
        let d = self.config.dim;
        let mut fixed: Vec<f64> = Vec::new();
        let mut fixed_rows = 0;
        let mut picks = Vec::with_capacity(queries.len());
        let live_rows = match update.terminal {
            Some(t) if !detached => tape.value(t).rows(),
            _ => 0,
        };
        for &(node, pos) in queries {
            match update.visible_row(node, pos).filter(|_| !detached) {
                Some(r) => picks.push(r),
                None => {
                    fixed.extend_from_slice(update.visible_embedding(tape, memory, node, pos));
                    picks.push(live_rows + fixed_rows);
                    fixed_rows += 1;
                }
            }
        }
        let live = update.terminal.filter(|_| !detached);
        let table = match (live, fixed_rows) {
            (Some(t), 0) => t,
            (None, _) => tape.constant(Tensor::matrix(fixed_rows, d, fixed)?),
            (Some(t), _) => {
                let c = tape.constant(Tensor::matrix(fixed_rows, d, fixed)?);
                tape.concat_rows(&[t, c])?
            }
        };
        let own = tape.gather_rows(table, &picks)?;
        if self.config.ablation.no_transform {
            return Ok(own);
        }

        let k = self.attention.neighbors;
        let mut inputs = NeighborInputs::new(k, d, self.feature_dim);
        for &(node, pos) in queries {
            let t = events[pos].timestamp;
            let entries = ctx.index.query(node, t, k, self.attention.strategy);
            let pairs: Vec<_> = entries
                .iter()
                .map(|e| (*e, update.visible_embedding(tape, memory, e.partner, pos)))
                .collect();
            inputs.push_query(t, &pairs, ctx.dataset)?;
        }
        self.attention
            .transform(tape, &self.store, self.attention_time_encoder(), own, &inputs)
    }

    /// Logits for the true edges at `positions` and for `negatives`, which
    /// holds `Q` candidate destinations per position (grouped by position).
    /// Negatives go through the transform only, reading memory as values.
    #[allow(clippy::too_many_arguments)]
    pub fn score_batch(
        &self,
        tape: &mut Tape,
        ctx: &StreamContext,
        memory: &MemoryStore,
        update: &UpdateOutput,
        events: &[Interaction],
        positions: &[usize],
        negatives: &[NodeId],
    ) -> Result<(Var, Option<Var>)> {
        let n = positions.len();
        if n == 0 || negatives.len() % n != 0 {
            return Err(Error::shape(
                "score_batch",
                format!("{} negatives for {n} positions", negatives.len()),
            ));
        }
        let q = negatives.len() / n;
        let queries: Vec<(NodeId, usize)> = positions
            .iter()
            .map(|&p| (events[p].source, p))
            .chain(positions.iter().map(|&p| (events[p].target, p)))
            .collect();
        let h = self.embed(tape, ctx, memory, update, events, &queries, false)?;
        let hu = tape.gather_rows(h, &(0..n).collect::<Vec<_>>())?;
        let hi = tape.gather_rows(h, &(n..2 * n).collect::<Vec<_>>())?;
        let pos = self.score(tape, hu, hi)?;
        if q == 0 {
            return Ok((pos, None));
        }
        let neg_queries: Vec<(NodeId, usize)> = negatives
            .iter()
            .enumerate()
            .map(|(j, &node)| (node, positions[j / q]))
            .collect();
        let hn = self.embed(tape, ctx, memory, update, events, &neg_queries, true)?;
        let rep: Vec<usize> = (0..n * q).map(|j| j / q).collect();
        let hu_rep = tape.gather_rows(hu, &rep)?;
        let neg = self.score(tape, hu_rep, hn)?;
        Ok((pos, Some(neg)))
    }

    /// Decoder logits `[n, 1]`.
    pub fn score(&self, tape: &mut Tape, hu: Var, hi: Var) -> Result<Var> {
        self.decoder.score(tape, &self.store, hu, hi, self.config.dropout)
    }

    /// Advances memory over a batch without scoring anything.
    pub fn advance(&self, memory: &mut MemoryStore, dataset: &Dataset, events: &[Interaction]) -> Result<()> {
        let mut tape = Tape::inference();
        let out = self.run_update(&mut tape, memory, dataset, events)?;
        commit_update(memory, &tape, &out, events)
    }

    /// Checks that the model's parameter layout matches `store`.
    pub fn load_store(&mut self, store: ParamStore) -> Result<()> {
        let same = store.len() == self.store.len()
            && store
                .iter()
                .zip(self.store.iter())
                .all(|((_, a), (_, b))| a.name == b.name && a.value.shape() == b.value.shape());
        if !same {
            return Err(Error::Checkpoint("parameter layout does not match the configured model".into()));
        }
        self.store = store;
        Ok(())
    }
}
