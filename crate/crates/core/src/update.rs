//! Continuous inference block: message encoding, latest-partner adjacency
//! and the gated affine ODE that evolves node embeddings.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::{Ablation, AdjacencyKind, Horizon, MemoryBound, ModelConfig, Solver};
use crate::error::{Error, Result};
use crate::graph::{Dataset, Interaction, MemoryStore, NodeId};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;
use crate::time_encoding::TimeEncoder;

/// Fully connected encoder `E = [h_v | h_{r_v} | f | F_T(dt)] W + b`.
#[derive(Clone, Debug)]
pub struct MessageEncoder {
    w: ParamId,
    b: ParamId,
    dim: usize,
    feature_dim: usize,
    time_dim: usize,
}

impl MessageEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        feature_dim: usize,
        time_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let input = 2 * dim + feature_dim + time_dim;
        MessageEncoder {
            w: store.add_uniform(format!("{prefix}.w"), &[input, dim], input, rng),
            b: store.add_uniform(format!("{prefix}.b"), &[dim], input, rng),
            dim,
            feature_dim,
            time_dim,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn input_dim(&self) -> usize {
        2 * self.dim + self.feature_dim + self.time_dim
    }

    /// `state` holds `[h_v | h_{r_v} | f]` rows, `time` the encoded intervals.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, state: Var, time: Var) -> Result<Var> {
        let x = tape.concat_last(&[state, time])?;
        if tape.value(x).cols() != self.input_dim() {
            return Err(Error::shape(
                "encode_message",
                format!("input width {} for encoder width {}", tape.value(x).cols(), self.input_dim()),
            ));
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Encodes the staged message of each `(node, now)` pair from memory.
/// A node without a staged interaction contributes a zero feature vector.
#[allow(clippy::too_many_arguments)]
pub fn encode_messages(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &MessageEncoder,
    time_encoder: &TimeEncoder,
    memory: &MemoryStore,
    dataset: &Dataset,
    nodes: &[(NodeId, f64)],
) -> Result<Var> {
    let d = memory.dim();
    let f = dataset.feature_dim();
    let width = 2 * d + f;
    let mut state = Vec::with_capacity(nodes.len() * width);
    let mut deltas = Vec::with_capacity(nodes.len());
    for &(v, now) in nodes {
        state.extend_from_slice(memory.embedding(v));
        state.extend_from_slice(memory.embedding(memory.partner(v)));
        match memory.staged(v) {
            Some(ordinal) => state.extend_from_slice(dataset.features(ordinal)),
            None => state.extend(std::iter::repeat_n(0.0, f)),
        }
        deltas.push(now - memory.timestamp(v));
    }
    let state = tape.constant(Tensor::matrix(nodes.len(), width, state)?);
    let time = time_encoder.encode(tape, store, &deltas)?;
    encoder.forward(tape, store, state, time)
}

/// `A = (beta/2)(I + D^{-1/2} S D^{-1/2})` over an active node set.
#[derive(Clone, Debug)]
pub struct LatestAdjacency {
    nodes: Vec<NodeId>,
    matrix: CsrMatrix,
    beta: f64,
}

impl LatestAdjacency {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Builds the regularized adjacency for `active` nodes, where `partners[j]`
/// is the latest partner of `active[j]`. Partners outside the set and the
/// sentinel add no edge; a node without edges gets the row `(beta/2) e_u`.
/// The directed variant skips mirroring and row-normalizes instead.
pub fn build_adjacency(
    active: &[NodeId],
    partners: &[NodeId],
    beta: f64,
    kind: AdjacencyKind,
) -> LatestAdjacency {
    assert_eq!(active.len(), partners.len(), "one partner per active node");
    let n = active.len();
    let position: HashMap<NodeId, usize> = active.iter().enumerate().map(|(j, &v)| (v, j)).collect();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for (j, &r) in partners.iter().enumerate() {
        if r.is_none() {
            continue;
        }
        if let Some(&k) = position.get(&r) {
            edges.push((j, k));
            if kind == AdjacencyKind::Symmetric {
                edges.push((k, j));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    let mut degree = vec![0.0f64; n];
    for &(a, _) in &edges {
        degree[a] += 1.0;
    }
    let half = beta / 2.0;
    let mut triplets: Vec<(usize, usize, f64)> = (0..n).map(|j| (j, j, half)).collect();
    for &(a, b) in &edges {
        let norm = match kind {
            AdjacencyKind::Symmetric => 1.0 / (degree[a] * degree[b]).sqrt(),
            AdjacencyKind::Directed => 1.0 / degree[a],
        };
        triplets.push((a, b, half * norm));
    }
    LatestAdjacency {
        nodes: active.to_vec(),
        matrix: CsrMatrix::from_triplets(n, n, &triplets),
        beta,
    }
}

/// Stacks per-block adjacencies into one block-diagonal matrix.
pub fn block_diagonal(blocks: &[LatestAdjacency]) -> CsrMatrix {
    let n: usize = blocks.iter().map(|b| b.nodes.len()).sum();
    let mut triplets = Vec::new();
    let mut offset = 0;
    for block in blocks {
        for r in 0..block.matrix.rows() {
            for (c, v) in block.matrix.row(r) {
                triplets.push((offset + r, offset + c, v));
            }
        }
        offset += block.nodes.len();
    }
    CsrMatrix::from_triplets(n, n, &triplets)
}

pub const GATE_NAMES: [&str; 3] = ["latest", "neighbor", "inherent"];

/// Gate parameters `z_* = sigma(H0 W_* + b_*)` plus solver settings.
#[derive(Clone, Debug)]
pub struct GatedOdeDynamics {
    weights: [ParamId; 3],
    biases: [ParamId; 3],
    pub beta: f64,
    pub solver: Solver,
    pub steps: usize,
    pub horizon: Horizon,
    pub adjacency: AdjacencyKind,
    pub bound: MemoryBound,
}

impl GatedOdeDynamics {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = config.dim;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for name in GATE_NAMES {
            weights.push(store.add_uniform(format!("{prefix}.w_{name}"), &[d, d], d, rng));
            biases.push(store.add_uniform(format!("{prefix}.b_{name}"), &[d], d, rng));
        }
        GatedOdeDynamics {
            weights: [weights[0], weights[1], weights[2]],
            biases: [biases[0], biases[1], biases[2]],
            beta: config.beta,
            solver: config.solver,
            steps: config.steps,
            horizon: config.horizon,
            adjacency: config.adjacency,
            bound: config.bound,
        }
    }

    /// Weight of gate `latest` (0), `neighbor` (1) or `inherent` (2).
    pub fn weight(&self, gate: usize) -> ParamId {
        self.weights[gate]
    }

    pub fn bias(&self, gate: usize) -> ParamId {
        self.biases[gate]
    }

    pub fn gates(&self, tape: &mut Tape, store: &ParamStore, h0: Var) -> Result<Gates> {
        let mut z = Vec::with_capacity(3);
        for g in 0..3 {
            let w = tape.param(store, self.weights[g]);
            let b = tape.param(store, self.biases[g]);
            let lin = tape.matmul(h0, w)?;
            let lin = tape.add_row(lin, b)?;
            z.push(tape.sigmoid(lin)?);
        }
        Ok(Gates {
            latest: z[0],
            neighbor: z[1],
            inherent: z[2],
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Gates {
    pub latest: Var,
    pub neighbor: Var,
    pub inherent: Var,
}

/// `dH/dt = z_l * H0 + z_n * (A H) - z_i * H` with gates frozen at `H0`.
/// `gates == None` fixes every gate at 1; disabled terms are dropped.
pub struct OdeSystem {
    adjacency: Arc<CsrMatrix>,
    h0: Var,
    gates: Option<Gates>,
    latest: Option<Var>,
    use_neighbor: bool,
    use_inherent: bool,
    row_scale: Option<Var>,
}

impl OdeSystem {
    pub fn new(
        tape: &mut Tape,
        adjacency: Arc<CsrMatrix>,
        h0: Var,
        gates: Option<Gates>,
        ablation: &Ablation,
    ) -> Result<Self> {
        let latest = if ablation.no_latest {
            None
        } else {
            Some(match gates {
                Some(g) => tape.mul(g.latest, h0)?,
                None => h0,
            })
        };
        Ok(OdeSystem {
            adjacency,
            h0,
            gates,
            latest,
            use_neighbor: !ablation.no_neighbor,
            use_inherent: !ablation.no_inherent,
            row_scale: None,
        })
    }

    /// Multiplies each row's derivative by a per-row factor, which amounts
    /// to integrating that row over `factor` time units.
    pub fn with_row_scale(mut self, scale: Var) -> Self {
        self.row_scale = Some(scale);
        self
    }

    pub fn h0(&self) -> Var {
        self.h0
    }
}

pub fn ode_rhs(tape: &mut Tape, system: &OdeSystem, h: Var) -> Result<Var> {
    let mut total: Option<Var> = system.latest;
    if system.use_neighbor {
        let ah = tape.spmm(system.adjacency.clone(), h)?;
        let term = match system.gates {
            Some(g) => tape.mul(g.neighbor, ah)?,
            None => ah,
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    if system.use_inherent {
        let term = match system.gates {
            Some(g) => tape.mul(g.inherent, h)?,
            None => h,
        };
        total = Some(match total {
            Some(t) => tape.sub(t, term)?,
            None => tape.scale(term, -1.0)?,
        });
    }
    let rhs = match total {
        Some(t) => t,
        None => {
            let shape = tape.value(h).shape().to_vec();
            tape.constant(Tensor::zeros(&shape))
        }
    };
    match system.row_scale {
        Some(s) => tape.mul_col(rhs, s),
        None => Ok(rhs),
    }
}

/// Fixed-step integration of [`ode_rhs`] from `H(0) = H0` to `horizon`.
pub fn ode_solve(
    tape: &mut Tape,
    system: &OdeSystem,
    solver: Solver,
    steps: usize,
    horizon: f64,
) -> Result<Var> {
    if steps == 0 || horizon.is_nan() || horizon <= 0.0 {
        return Err(Error::Config(format!(
            "ODE integration needs steps >= 1 and a positive horizon, got {steps} and {horizon}"
        )));
    }
    let dt = horizon / steps as f64;
    let mut h = system.h0;
    for _ in 0..steps {
        h = match solver {
            Solver::Euler => {
                let k1 = ode_rhs(tape, system, h)?;
                let step = tape.scale(k1, dt)?;
                tape.add(h, step)?
            }
            Solver::Rk4 => {
                let k1 = ode_rhs(tape, system, h)?;
                let s = tape.scale(k1, dt / 2.0)?;
                let h2 = tape.add(h, s)?;
                let k2 = ode_rhs(tape, system, h2)?;
                let s = tape.scale(k2, dt / 2.0)?;
                let h3 = tape.add(h, s)?;
                let k3 = ode_rhs(tape, system, h3)?;
                let s = tape.scale(k3, dt)?;
                let h4 = tape.add(h, s)?;
                let k4 = ode_rhs(tape, system, h4)?;
                let k23 = tape.add(k2, k3)?;
                let k23 = tape.scale(k23, 2.0)?;
                let sum = tape.add(k1, k23)?;
                let sum = tape.add(sum, k4)?;
                let step = tape.scale(sum, dt / 6.0)?;
                tape.add(h, step)?
            }
        };
    }
    Ok(h)
}

/// Message encoder and gated dynamics.
#[derive(Clone, Debug)]
pub struct UpdateModule {
    pub encoder: MessageEncoder,
    pub dynamics: GatedOdeDynamics,
}

/// Result of [`run_update`] for one batch.
///
/// Each interaction owns a block made of `{u, i, r_u, r_i} \ {0}`; blocks do
/// not interact. A batch endpoint's new embedding is taken from the block of
/// its first interaction in the batch.
#[derive(Debug)]
pub struct UpdateOutput {
    /// Terminal ODE state, one row per block member; `None` when the update
    /// is ablated.
    pub terminal: Option<Var>,
    /// `(batch position, node)` of every terminal row.
    pub rows: Vec<(usize, NodeId)>,
    /// Terminal row carrying each endpoint's new embedding.
    pub written: HashMap<NodeId, usize>,
    /// Batch position of each endpoint's first interaction.
    pub first_seen: HashMap<NodeId, usize>,
}

impl UpdateOutput {
    /// Terminal row that holds `node`'s embedding as seen by the interaction
    /// at batch position `pos`: only updates from interactions at or before
    /// `pos` are visible.
    pub fn visible_row(&self, node: NodeId, pos: usize) -> Option<usize> {
        self.terminal?;
        match self.first_seen.get(&node) {
            Some(&first) if first <= pos => self.written.get(&node).copied(),
            _ => None,
        }
    }

    /// The embedding `node` has at batch position `pos`, as plain values.
    pub fn visible_embedding<'a>(
        &self,
        tape: &'a Tape,
        memory: &'a MemoryStore,
        node: NodeId,
        pos: usize,
    ) -> &'a [f64] {
        match (self.visible_row(node, pos), self.terminal) {
            (Some(row), Some(t)) => tape.value(t).row(row),
            _ => memory.embedding(node),
        }
    }
}

/// Runs the continuous inference block for a chronological batch without
/// touching memory; see [`commit_update`].
#[allow(clippy::too_many_arguments)]
pub fn run_update(
    tape: &mut Tape,
    store: &ParamStore,
    module: &UpdateModule,
    time_encoder: &TimeEncoder,
    memory: &MemoryStore,
    dataset: &Dataset,
    events: &[Interaction],
    ablation: &Ablation,
) -> Result<UpdateOutput> {
    let mut first_seen = HashMap::new();
    for (pos, e) in events.iter().enumerate() {
        first_seen.entry(e.source).or_insert(pos);
        first_seen.entry(e.target).or_insert(pos);
    }
    if ablation.no_update {
        return Ok(UpdateOutput {
            terminal: None,
            rows: Vec::new(),
            written: HashMap::new(),
            first_seen,
        });
    }

    let dynamics = &module.dynamics;
    let mut blocks = Vec::with_capacity(events.len());
    let mut rows = Vec::new();
    let mut inputs = Vec::new();
    let mut scale = Vec::new();
    let mut written = HashMap::new();
    for (pos, e) in events.iter().enumerate() {
        let mut active: Vec<NodeId> = Vec::with_capacity(4);
        for v in [e.source, e.target, memory.partner(e.source), memory.partner(e.target)] {
            if !v.is_none() && !active.contains(&v) {
                active.push(v);
            }
        }
        let partners: Vec<NodeId> = active.iter().map(|&v| memory.partner(v)).collect();
        for &v in &active {
            if (v == e.source || v == e.target) && first_seen[&v] == pos {
                written.insert(v, rows.len());
            }
            rows.push((pos, v));
            inputs.push((v, e.timestamp));
            scale.push(e.timestamp - memory.timestamp(v));
        }
        blocks.push(build_adjacency(&active, &partners, dynamics.beta, dynamics.adjacency));
    }

    let h0 = encode_messages(tape, store, &module.encoder, time_encoder, memory, dataset, &inputs)?;
    let gates = if ablation.no_adaptive {
        None
    } else {
        Some(dynamics.gates(tape, store, h0)?)
    };
    let adjacency = Arc::new(block_diagonal(&blocks));
    let mut system = OdeSystem::new(tape, adjacency, h0, gates, ablation)?;
    let horizon = match dynamics.horizon {
        Horizon::Fixed(t) => t,
        Horizon::RealInterval => {
            let s = tape.constant(Tensor::matrix(scale.len(), 1, scale)?);
            system = system.with_row_scale(s);
            1.0
        }
    };
    let terminal = ode_solve(tape, &system, dynamics.solver, dynamics.steps, horizon)?;
    let terminal = match dynamics.bound {
        MemoryBound::None => terminal,
        MemoryBound::Tanh => tape.tanh(terminal)?,
    };
    Ok(UpdateOutput {
        terminal: Some(terminal),
        rows,
        written,
        first_seen,
    })
}

/// Writes a batch into memory: new embeddings for endpoints, then latest
/// partner and time for both endpoints of every interaction in order, and
/// stages each interaction as the endpoints' pending message.
pub fn commit_update(
    memory: &mut MemoryStore,
    tape: &Tape,
    output: &UpdateOutput,
    events: &[Interaction],
) -> Result<()> {
    if let Some(terminal) = output.terminal {
        let values = tape.value(terminal);
        let mut written: Vec<(&NodeId, &usize)> = output.written.iter().collect();
        written.sort();
        for (&node, &row) in written {
            let pos = output.first_seen[&node];
            let e = &events[pos];
            let partner = if e.source == node { e.target } else { e.source };
            memory.update_memory(node, values.row(row), partner, e.timestamp)?;
        }
    }
    for e in events {
        memory.touch(e.source, e.target, e.timestamp)?;
        memory.touch(e.target, e.source, e.timestamp)?;
        memory.stage(e.source, e.ordinal)?;
        memory.stage(e.target, e.ordinal)?;
    }
    Ok(())
}
