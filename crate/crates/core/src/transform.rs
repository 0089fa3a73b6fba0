//! Temporal multi-head attention over historical neighbors.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::QueryTime;
use crate::error::{Error, Result};
use crate::graph::{Dataset, NeighborEntry, SamplingStrategy};
use crate::tensor::Tensor;
use crate::time_encoding::TimeEncoder;

#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Projections for `M` heads plus the combiner
/// `h_hat = [head_1 | ... | head_M | h] W_out + b_out`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    heads: Vec<AttentionHead>,
    combiner_w: ParamId,
    combiner_b: ParamId,
    dim: usize,
    head_dim: usize,
    feature_dim: usize,
    time_dim: usize,
    pub neighbors: usize,
    pub strategy: SamplingStrategy,
    pub query_time: QueryTime,
    pub dropout: f64,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        feature_dim: usize,
        time_dim: usize,
        neighbors: usize,
        strategy: SamplingStrategy,
        query_time: QueryTime,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        let head_dim = dim / heads;
        let query_in = dim + time_dim;
        let key_in = dim + feature_dim + time_dim;
        let heads = (0..heads)
            .map(|h| AttentionHead {
                query: store.add_uniform(format!("{prefix}.head{h}.w_q"), &[query_in, head_dim], query_in, rng),
                key: store.add_uniform(format!("{prefix}.head{h}.w_k"), &[key_in, head_dim], key_in, rng),
                value: store.add_uniform(format!("{prefix}.head{h}.w_v"), &[key_in, head_dim], key_in, rng),
            })
            .collect::<Vec<_>>();
        let combined = heads.len() * head_dim + dim;
        Ok(AttentionParams {
            combiner_w: store.add_uniform(format!("{prefix}.out.w"), &[combined, dim], combined, rng),
            combiner_b: store.add_uniform(format!("{prefix}.out.b"), &[dim], combined, rng),
            heads,
            dim,
            head_dim,
            feature_dim,
            time_dim,
            neighbors,
            strategy,
            query_time,
            dropout,
        })
    }

    pub fn heads(&self) -> &[AttentionHead] {
        &self.heads
    }

    pub fn combiner(&self) -> (ParamId, ParamId) {
        (self.combiner_w, self.combiner_b)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    /// Future embeddings for a batch of queries. `own` holds each query
    /// node's memory embedding, one row per query of `inputs`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        time_encoder: &TimeEncoder,
        own: Var,
        inputs: &NeighborInputs,
    ) -> Result<Var> {
        let (zq, zn) = assemble_attention_inputs(tape, store, time_encoder, own, inputs, self.query_time)?;
        let mut outputs = Vec::with_capacity(self.heads.len() + 1);
        for head in &self.heads {
            let wq = tape.param(store, head.query);
            let wk = tape.param(store, head.key);
            let wv = tape.param(store, head.value);
            let q = tape.matmul(zq, wq)?;
            let k = tape.matmul(zn, wk)?;
            let v = tape.matmul(zn, wv)?;
            outputs.push(tape.attention(q, k, v, &inputs.mask, self.scale())?);
        }
        let heads = tape.concat_last(&outputs)?;
        let heads = tape.dropout(heads, self.dropout)?;
        self.combine(tape, store, heads, own)
    }

    /// Applies the output layer to `[heads | own]`.
    pub fn combine(&self, tape: &mut Tape, store: &ParamStore, heads: Var, own: Var) -> Result<Var> {
        let x = tape.concat_last(&[heads, own])?;
        let w = tape.param(store, self.combiner_w);
        let b = tape.param(store, self.combiner_b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn check(&self, inputs: &NeighborInputs) -> Result<()> {
        if inputs.k != self.neighbors || inputs.dim != self.dim || inputs.feature_dim != self.feature_dim {
            return Err(Error::shape(
                "transform",
                format!(
                    "inputs (k={}, d={}, f={}) for layer (k={}, d={}, f={})",
                    inputs.k, inputs.dim, inputs.feature_dim, self.neighbors, self.dim, self.feature_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    /// [`AttentionParams::forward`] with an input-layout check.
    pub fn transform(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        time_encoder: &TimeEncoder,
        own: Var,
        inputs: &NeighborInputs,
    ) -> Result<Var> {
        self.check(inputs)?;
        self.forward(tape, store, time_encoder, own, inputs)
    }
}

/// Key/value material for a batch of attention queries: `k` slots per
/// query, padded with masked zero rows when the history is shorter.
#[derive(Clone, Debug)]
pub struct NeighborInputs {
    k: usize,
    dim: usize,
    feature_dim: usize,
    query_times: Vec<f64>,
    embeddings: Vec<f64>,
    features: Vec<f64>,
    deltas: Vec<f64>,
    mask: Vec<bool>,
}

impl NeighborInputs {
    pub fn new(k: usize, dim: usize, feature_dim: usize) -> Self {
        NeighborInputs {
            k,
            dim,
            feature_dim,
            query_times: Vec::new(),
            embeddings: Vec::new(),
            features: Vec::new(),
            deltas: Vec::new(),
            mask: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.query_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_times.is_empty()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Adds a query at time `t`. Each neighbor comes with the memory
    /// embedding of its partner; entries at or after `t` are rejected.
    pub fn push_query(
        &mut self,
        t: f64,
        neighbors: &[(NeighborEntry, &[f64])],
        dataset: &Dataset,
    ) -> Result<()> {
        if neighbors.len() > self.k {
            return Err(Error::shape(
                "assemble_attention_inputs",
                format!("{} neighbors for {} slots", neighbors.len(), self.k),
            ));
        }
        self.query_times.push(t);
        for (entry, embedding) in neighbors {
            if entry.timestamp >= t {
                return Err(Error::Data(format!(
                    "neighbor at t={} offered to a query at t={t}",
                    entry.timestamp
                )));
            }
            if embedding.len() != self.dim {
                return Err(Error::shape(
                    "assemble_attention_inputs",
                    format!("neighbor embedding of length {} for width {}", embedding.len(), self.dim),
                ));
            }
            self.embeddings.extend_from_slice(embedding);
            self.features.extend_from_slice(dataset.features(entry.ordinal));
            self.deltas.push(t - entry.timestamp);
            self.mask.push(true);
        }
        for _ in neighbors.len()..self.k {
            self.embeddings.extend(std::iter::repeat_n(0.0, self.dim));
            self.features.extend(std::iter::repeat_n(0.0, self.feature_dim));
            self.deltas.push(0.0);
            self.mask.push(false);
        }
        Ok(())
    }
}

/// Builds `Z_v = [h_v | F_T(q)]` (one row per query, `q` = 0 or the query
/// time) and `Z_N = [h_j | f_j | F_T(t - t_j)]` (`k` rows per query).
pub fn assemble_attention_inputs(
    tape: &mut Tape,
    store: &ParamStore,
    time_encoder: &TimeEncoder,
    own: Var,
    inputs: &NeighborInputs,
    query_time: QueryTime,
) -> Result<(Var, Var)> {
    let n = inputs.len();
    if tape.value(own).rows() != n || tape.value(own).cols() != inputs.dim {
        return Err(Error::shape(
            "assemble_attention_inputs",
            format!("own embeddings {:?} for {n} queries of width {}", tape.value(own).shape(), inputs.dim),
        ));
    }
    let query_times: Vec<f64> = match query_time {
        QueryTime::ZeroDelta => vec![0.0; n],
        QueryTime::Absolute => inputs.query_times.clone(),
    };
    let tq = time_encoder.encode(tape, store, &query_times)?;
    let zq = tape.concat_last(&[own, tq])?;
    let rows = n * inputs.k;
    let emb = tape.constant(Tensor::matrix(rows, inputs.dim, inputs.embeddings.clone())?);
    let feats = tape.constant(Tensor::matrix(rows, inputs.feature_dim, inputs.features.clone())?);
    let tk = time_encoder.encode(tape, store, &inputs.deltas)?;
    let zn = tape.concat_last(&[emb, feats, tk])?;
    Ok((zq, zn))
}

/// Reference single-head attention for one query, composed from generic
/// tape primitives. `zq` is `[1, q_in]`, `zn` is `[k, kv_in]`.
pub fn attend_one_head(
    tape: &mut Tape,
    store: &ParamStore,
    head: &AttentionHead,
    zq: Var,
    zn: Var,
    mask: &[bool],
    scale: f64,
) -> Result<Var> {
    let wq = tape.param(store, head.query);
    let wk = tape.param(store, head.key);
    let wv = tape.param(store, head.value);
    let q = tape.matmul(zq, wq)?;
    let keep: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j).collect();
    if keep.is_empty() {
        let width = store.value(head.value).cols();
        return Ok(tape.constant(Tensor::zeros(&[1, width])));
    }
    let zn = tape.gather_rows(zn, &keep)?;
    let k = tape.matmul(zn, wk)?;
    let v = tape.matmul(zn, wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, scale)?;
    let alpha = tape.softmax_last(scores)?;
    tape.matmul(alpha, v)
}
