//! Dynamic embedding learner: message construction, GRU memory updates
//! and time-encoded temporal graph attention, with leakage-safe batch
//! processing.
//!
//! Batch discipline: embeddings for a batch are computed from state that
//! reflects only strictly earlier batches. Memory updates for a batch
//! are recorded on the *next* batch's tape (so the recurrent updater
//! receives gradients), then committed to the plain-value store after
//! that tape's backward pass. `flush_pending` applies any outstanding
//! updates forward-only, e.g. at epoch end before a snapshot.
//!
//! Timestamps are rebased to the first training event so that the
//! never-updated marker 0 produces moderate time deltas; all deltas are
//! additionally scaled by the training stream's mean inter-event gap
//! before entering the recurrent cell or the time encoder.

use crate::events::{InteractionEvent, NodeIndex, TemporalNeighborStore, EDGE_FEATURE_LEN};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use tgrec_tensor::{
    gru_cell, GruLeaves, GruParams, ParamError, ParamId, ParameterStore, Shape, Tape, TensorError,
    TensorId,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("batches must arrive in non-decreasing time order: {prev} then {next}")]
    OutOfOrderBatch { prev: i64, next: i64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, EncoderError>;

/// Architecture knobs of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub memory_dim: usize,
    pub time_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_neighbors: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { memory_dim: 32, time_dim: 8, n_heads: 2, n_layers: 1, n_neighbors: 10 }
    }
}

impl EncoderConfig {
    pub fn message_width(&self) -> usize {
        2 * self.memory_dim + 1 + EDGE_FEATURE_LEN
    }

    pub fn key_width(&self) -> usize {
        self.memory_dim + EDGE_FEATURE_LEN + self.time_dim
    }

    pub fn query_width(&self) -> usize {
        self.memory_dim + self.time_dim
    }
}

/// Parameter handles of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttnLayerParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

/// The encoder's learnable state plus the time normalization constants
/// frozen from the training stream.
pub struct TgnModel {
    pub store: ParameterStore,
    pub cfg: EncoderConfig,
    pub gru: GruParams,
    pub time_omega: ParamId,
    pub time_phase: ParamId,
    pub layers: Vec<AttnLayerParams>,
    /// First training event timestamp; all times are rebased to it.
    pub time_origin: i64,
    /// Mean inter-event gap (seconds) of the training stream.
    pub delta_scale: f64,
}

impl TgnModel {
    pub fn new<R: rand::Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParameterStore::new();
        let d = cfg.memory_dim;
        let gru = GruParams::create(&mut store, "memory_gru", cfg.message_width(), d, rng)?;

        // geometric frequency ladder spanning the data's timescales
        let omega_vals: Vec<f64> =
            (0..cfg.time_dim).map(|k| 10f64.powf(-2.0 * k as f64 / cfg.time_dim as f64)).collect();
        let time_omega = store.add_vector_values("time.omega", omega_vals)?;
        let time_phase = store.add_vector_zeros("time.phase", cfg.time_dim)?;

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 1..=cfg.n_layers {
            layers.push(AttnLayerParams {
                w_query: store.add_matrix(&format!("attn{l}.w_query"), d, cfg.query_width(), rng)?,
                w_key: store.add_matrix(&format!("attn{l}.w_key"), d, cfg.key_width(), rng)?,
                w_value: store.add_matrix(&format!("attn{l}.w_value"), d, cfg.key_width(), rng)?,
                mlp_w1: store.add_matrix(&format!("attn{l}.mlp_w1"), d, 2 * d, rng)?,
                mlp_b1: store.add_vector_zeros(&format!("attn{l}.mlp_b1"), d)?,
                mlp_w2: store.add_matrix(&format!("attn{l}.mlp_w2"), d, d, rng)?,
                mlp_b2: store.add_vector_zeros(&format!("attn{l}.mlp_b2"), d)?,
            });
        }
        Ok(TgnModel { store, cfg, gru, time_omega, time_phase, layers, time_origin: 0, delta_scale: 1.0 })
    }

    /// Freeze the time rebase origin and mean inter-event gap from the
    /// training stream.
    pub fn set_time_stats(&mut self, events: &[InteractionEvent]) {
        if let Some(first) = events.first() {
            self.time_origin = first.timestamp;
        }
        let mut gaps = 0i64;
        let mut count = 0i64;
        for w in events.windows(2) {
            gaps += w[1].timestamp - w[0].timestamp;
            count += 1;
        }
        self.delta_scale = if count > 0 && gaps > 0 { gaps as f64 / count as f64 } else { 1.0 };
    }

    pub fn rebase(&self, t: i64) -> i64 {
        t - self.time_origin
    }
}

// ----------------------------------------------------------------------
// Per-node memory
// ----------------------------------------------------------------------

/// Per-node state vectors with rebased last-update times; 0 means never
/// updated. States start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    dim: usize,
    states: Vec<f64>,
    last_update: Vec<i64>,
}

impl MemoryState {
    pub fn new(n_nodes: usize, dim: usize) -> Self {
        MemoryState { dim, states: vec![0.0; n_nodes * dim], last_update: vec![0; n_nodes] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.last_update.len()
    }

    pub fn get(&self, node: NodeIndex) -> &[f64] {
        let i = node as usize * self.dim;
        &self.states[i..i + self.dim]
    }

    pub fn set(&mut self, node: NodeIndex, values: &[f64]) {
        let i = node as usize * self.dim;
        self.states[i..i + self.dim].copy_from_slice(values);
    }

    pub fn last_update(&self, node: NodeIndex) -> i64 {
        self.last_update[node as usize]
    }

    pub fn set_last_update(&mut self, node: NodeIndex, t_rebased: i64) {
        debug_assert!(t_rebased >= self.last_update[node as usize]);
        self.last_update[node as usize] = t_rebased;
    }
}

/// One event waiting to drive a memory update at the start of the next
/// recorded batch.
#[derive(Clone, Copy, Debug)]
pub struct PendingEvent {
    pub user: NodeIndex,
    pub item: NodeIndex,
    pub timestamp: i64,
    pub event_idx: u32,
}

/// Everything the replay loop mutates, always by a single writer in
/// batch order.
pub struct TgnState {
    pub memory: MemoryState,
    pub neighbors: TemporalNeighborStore,
    pub pending: Vec<PendingEvent>,
    last_batch_ts: i64,
}

impl TgnState {
    pub fn new(n_nodes: usize, dim: usize) -> Self {
        TgnState {
            memory: MemoryState::new(n_nodes, dim),
            neighbors: TemporalNeighborStore::new(n_nodes),
            pending: Vec::new(),
            last_batch_ts: i64::MIN,
        }
    }

    /// Insert edges without queuing memory updates, for state whose
    /// memory snapshot already covers these events.
    pub fn preload_edges(&mut self, events: &[InteractionEvent], first_event_idx: u32) {
        for (k, e) in events.iter().enumerate() {
            self.neighbors.insert(first_event_idx + k as u32, e);
            self.last_batch_ts = e.timestamp;
        }
    }

    /// Register a processed batch: its events feed the next memory
    /// update and its edges become visible to later neighbor queries.
    pub fn push_batch(&mut self, events: &[InteractionEvent], first_event_idx: u32) -> Result<()> {
        if let Some(first) = events.first() {
            if first.timestamp < self.last_batch_ts {
                return Err(EncoderError::OutOfOrderBatch {
                    prev: self.last_batch_ts,
                    next: first.timestamp,
                });
            }
        }
        for (k, e) in events.iter().enumerate() {
            let idx = first_event_idx + k as u32;
            self.pending.push(PendingEvent {
                user: e.user,
                item: e.item,
                timestamp: e.timestamp,
                event_idx: idx,
            });
            self.neighbors.insert(idx, e);
            self.last_batch_ts = e.timestamp;
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------
// Message aggregation
// ----------------------------------------------------------------------

/// The chosen most-recent message for one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AggregatedMessage {
    pub node: NodeIndex,
    pub other: NodeIndex,
    pub timestamp: i64,
    pub event_idx: u32,
}

/// Keep only the most recent message per node; ties on timestamp go to
/// the later batch position. Output sorted by node index.
pub fn aggregate_latest(pending: &[PendingEvent]) -> Vec<AggregatedMessage> {
    let mut best: BTreeMap<NodeIndex, (i64, usize, AggregatedMessage)> = BTreeMap::new();
    for (pos, e) in pending.iter().enumerate() {
        for (node, other) in [(e.user, e.item), (e.item, e.user)] {
            let msg = AggregatedMessage {
                node,
                other,
                timestamp: e.timestamp,
                event_idx: e.event_idx,
            };
            match best.get(&node) {
                Some(&(t, p, _)) if (t, p) >= (e.timestamp, pos) => {}
                _ => {
                    best.insert(node, (e.timestamp, pos, msg));
                }
            }
        }
    }
    best.into_values().map(|(_, _, m)| m).collect()
}

// ----------------------------------------------------------------------
// Tape-side batch machinery
// ----------------------------------------------------------------------

/// Tape leaves for every model parameter, plus the cached φ(0) vector.
pub struct BatchLeaves {
    pub gru: GruLeaves,
    pub omega: TensorId,
    pub phase: TensorId,
    pub phi_zero: TensorId,
    pub layers: Vec<AttnLayerLeaves>,
}

#[derive(Clone, Copy)]
pub struct AttnLayerLeaves {
    pub w_query: TensorId,
    pub w_key: TensorId,
    pub w_value: TensorId,
    pub mlp_w1: TensorId,
    pub mlp_b1: TensorId,
    pub mlp_w2: TensorId,
    pub mlp_b2: TensorId,
}

impl BatchLeaves {
    /// Create the parameter leaves from `store`, which is normally the
    /// model's own store; gradient audits pass a perturbed copy.
    pub fn on_tape(tape: &mut Tape, model: &TgnModel, store: &ParameterStore) -> Result<Self> {
        let omega = tape.param(store, model.time_omega);
        let phase = tape.param(store, model.time_phase);
        let phi_zero = tape.cos(phase)?;
        let layers = model
            .layers
            .iter()
            .map(|l| AttnLayerLeaves {
                w_query: tape.param(store, l.w_query),
                w_key: tape.param(store, l.w_key),
                w_value: tape.param(store, l.w_value),
                mlp_w1: tape.param(store, l.mlp_w1),
                mlp_b1: tape.param(store, l.mlp_b1),
                mlp_w2: tape.param(store, l.mlp_w2),
                mlp_b2: tape.param(store, l.mlp_b2),
            })
            .collect();
        Ok(BatchLeaves {
            gru: GruLeaves::on_tape(tape, store, &model.gru),
            omega,
            phase,
            phi_zero,
            layers,
        })
    }

    /// φ(Δt) = cos(Δt·ω + b), with Δt already scaled.
    pub fn time_phi(&self, tape: &mut Tape, dt_scaled: f64) -> Result<TensorId> {
        if dt_scaled == 0.0 {
            return Ok(self.phi_zero);
        }
        let scaled = tape.scale(self.omega, dt_scaled)?;
        let arg = tape.add(scaled, self.phase)?;
        Ok(tape.cos(arg)?)
    }
}

/// Resolves node memory to tape tensors: nodes updated on this tape map
/// to their latest GRU outputs, everything else becomes a cached
/// constant leaf.
#[derive(Default)]
pub struct MemoryView {
    updated: HashMap<NodeIndex, TensorId>,
    consts: HashMap<NodeIndex, TensorId>,
}

impl MemoryView {
    pub fn resolve(&mut self, tape: &mut Tape, memory: &MemoryState, node: NodeIndex) -> TensorId {
        if let Some(&t) = self.updated.get(&node) {
            return t;
        }
        if let Some(&t) = self.consts.get(&node) {
            return t;
        }
        let id = tape.vector(memory.get(node));
        self.consts.insert(node, id);
        id
    }

    pub fn updated_tensor(&self, node: NodeIndex) -> Option<TensorId> {
        self.updated.get(&node).copied()
    }
}

/// One committed-to-be memory update: node, its new rebased update time
/// and the tape tensor holding the new state.
#[derive(Clone, Copy, Debug)]
pub struct AppliedUpdate {
    pub node: NodeIndex,
    pub t_rebased: i64,
    pub tensor: TensorId,
}

/// Raw message `[s_node ‖ s_other ‖ Δt_scaled ‖ e]` as a tape tensor.
pub fn build_message(
    tape: &mut Tape,
    s_node: TensorId,
    s_other: TensorId,
    dt_scaled: f64,
    edge_feature: &[f64; EDGE_FEATURE_LEN],
) -> Result<TensorId> {
    let dt = tape.scalar(dt_scaled);
    let e = tape.vector(edge_feature);
    Ok(tape.concat(&[s_node, s_other, dt, e])?)
}

/// Record the pending batch's memory updates on this tape: build one
/// most-recent message per touched node, run the recurrent cell, wire
/// the outputs into the view. Inputs resolve through the view, so in a
/// fresh per-batch view they are pre-batch store constants, while on a
/// persistent single-tape view they chain through earlier updates.
/// Values reach the store only via [`commit_updates`].
pub fn apply_pending_updates(
    tape: &mut Tape,
    model: &TgnModel,
    state: &TgnState,
    events: &[InteractionEvent],
    leaves: &BatchLeaves,
    view: &mut MemoryView,
) -> Result<Vec<AppliedUpdate>> {
    let mut applied = Vec::new();
    for msg in aggregate_latest(&state.pending) {
        let s_node = view.resolve(tape, &state.memory, msg.node);
        let s_other = view.resolve(tape, &state.memory, msg.other);
        let t_reb = model.rebase(msg.timestamp);
        let dt = (t_reb - state.memory.last_update(msg.node)) as f64 / model.delta_scale;
        let m = build_message(
            tape,
            s_node,
            s_other,
            dt,
            &events[msg.event_idx as usize].edge_feature,
        )?;
        let h_new = gru_cell(tape, m, s_node, &leaves.gru)?;
        view.updated.insert(msg.node, h_new);
        applied.push(AppliedUpdate { node: msg.node, t_rebased: t_reb, tensor: h_new });
    }
    Ok(applied)
}

/// Write updated memory values into the store and clear the consumed
/// pending events. Call after the tape is done (post-backward during
/// training, immediately in forward-only replay).
pub fn commit_updates(tape: &Tape, state: &mut TgnState, applied: &[AppliedUpdate]) {
    for u in applied {
        state.memory.set(u.node, tape.value(u.tensor));
        state.memory.set_last_update(u.node, u.t_rebased);
    }
    state.pending.clear();
}

/// Advance last-update clocks and drop consumed pending events without
/// touching memory values; the single-tape unrolled path keeps state in
/// tape tensors instead.
pub fn advance_clock(state: &mut TgnState, applied: &[AppliedUpdate]) {
    for u in applied {
        state.memory.set_last_update(u.node, u.t_rebased);
    }
    state.pending.clear();
}

/// Apply all outstanding updates forward-only on a scratch tape.
pub fn flush_pending(
    model: &TgnModel,
    state: &mut TgnState,
    events: &[InteractionEvent],
) -> Result<()> {
    if state.pending.is_empty() {
        return Ok(());
    }
    let mut tape = Tape::new();
    let leaves = BatchLeaves::on_tape(&mut tape, model, &model.store)?;
    let mut view = MemoryView::default();
    let applied = apply_pending_updates(&mut tape, model, state, events, &leaves, &mut view)?;
    commit_updates(&tape, state, &applied);
    Ok(())
}

/// Shared references for embedding calls within one batch.
pub struct EmbedCtx<'a> {
    pub model: &'a TgnModel,
    pub events: &'a [InteractionEvent],
    pub neighbors: &'a TemporalNeighborStore,
    pub memory: &'a MemoryState,
}

/// Temporal attention embedding of `node` at time `t`, reading only
/// pre-batch state (neighbor entries strictly before `t`, memory via
/// the view).
pub fn embed_node(
    tape: &mut Tape,
    ctx: &EmbedCtx,
    leaves: &BatchLeaves,
    view: &mut MemoryView,
    node: NodeIndex,
    t: i64,
) -> Result<TensorId> {
    embed_layer(tape, ctx, leaves, view, node, t, ctx.model.cfg.n_layers, &mut Vec::new())
}

/// Like [`embed_node`] but collecting every attention-weight matrix
/// (neighbors × heads, post-softmax) produced along the way.
pub fn embed_node_debug(
    tape: &mut Tape,
    ctx: &EmbedCtx,
    leaves: &BatchLeaves,
    view: &mut MemoryView,
    node: NodeIndex,
    t: i64,
) -> Result<(TensorId, Vec<TensorId>)> {
    let mut attn = Vec::new();
    let id = embed_layer(tape, ctx, leaves, view, node, t, ctx.model.cfg.n_layers, &mut attn)?;
    Ok((id, attn))
}

#[allow(clippy::too_many_arguments)]
fn embed_layer(
    tape: &mut Tape,
    ctx: &EmbedCtx,
    leaves: &BatchLeaves,
    view: &mut MemoryView,
    node: NodeIndex,
    t: i64,
    layer: usize,
    attn_out: &mut Vec<TensorId>,
) -> Result<TensorId> {
    if layer == 0 {
        return Ok(view.resolve(tape, ctx.memory, node));
    }
    let cfg = &ctx.model.cfg;
    let lp = &leaves.layers[layer - 1];
    let h_self = embed_layer(tape, ctx, leaves, view, node, t, layer - 1, attn_out)?;

    let query_in = tape.concat(&[h_self, leaves.phi_zero])?;
    let q = tape.matvec(lp.w_query, query_in)?;

    let nbrs = ctx.neighbors.neighbors(node, t, cfg.n_neighbors);
    let attended = if nbrs.is_empty() {
        tape.constant(Shape::Vector(cfg.memory_dim), vec![0.0; cfg.memory_dim])?
    } else {
        let mut rows = Vec::with_capacity(nbrs.len());
        for nb in &nbrs {
            let h_j = embed_layer(tape, ctx, leaves, view, nb.neighbor, nb.timestamp, layer - 1, attn_out)?;
            let e = tape.vector(&ctx.events[nb.event_idx as usize].edge_feature);
            let dt = (t - nb.timestamp) as f64 / ctx.model.delta_scale;
            let phi = leaves.time_phi(tape, dt)?;
            rows.push(tape.concat(&[h_j, e, phi])?);
        }
        let stacked = tape.stack_rows(&rows)?;
        let keys = tape.matmul_t(stacked, lp.w_key)?;
        let values = tape.matmul_t(stacked, lp.w_value)?;
        let scores = tape.head_scores(keys, q, cfg.n_heads)?;
        let weights = tape.softmax_cols(scores)?;
        attn_out.push(weights);
        tape.head_mix(weights, values, cfg.n_heads)?
    };

    let combined = tape.concat(&[h_self, attended])?;
    let hid_pre = tape.matvec(lp.mlp_w1, combined)?;
    let hid_b = tape.add(hid_pre, lp.mlp_b1)?;
    let hid = tape.tanh(hid_b)?;
    let out_pre = tape.matvec(lp.mlp_w2, hid)?;
    Ok(tape.add(out_pre, lp.mlp_b2)?)
}

// ----------------------------------------------------------------------
// Checkpoints: parameters + memory snapshot + config echo
// ----------------------------------------------------------------------

/// In-memory snapshot of one training epoch.
#[derive(Clone)]
pub struct EpochCheckpoint {
    pub epoch: usize,
    pub params: BTreeMap<String, Vec<f64>>,
    pub memory: MemoryState,
}

pub const MODEL_CHECKPOINT_FORMAT: &str = "tgrec-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    config_echo: String,
    encoder: EncoderConfig,
    epoch: usize,
    time_origin: i64,
    delta_scale: f64,
    params: BTreeMap<String, ParamDoc>,
    memory: BTreeMap<String, MemoryDoc>,
}

#[derive(Serialize, Deserialize)]
struct ParamDoc {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MemoryDoc {
    state: Vec<f64>,
    last_update: i64,
}

/// Write a reloadable checkpoint: encoder config, resolved run config
/// echo, all parameters and the memory snapshot keyed by node name.
pub fn save_checkpoint<W: Write>(
    mut w: W,
    model: &TgnModel,
    ckpt: &EpochCheckpoint,
    node_names: impl Fn(NodeIndex) -> String,
    config_echo: &str,
) -> Result<()> {
    let mut params = BTreeMap::new();
    for id in model.store.ids() {
        let p = model.store.param(id);
        params.insert(
            p.name.clone(),
            ParamDoc {
                shape: p.shape.dims(),
                values: ckpt.params.get(&p.name).cloned().unwrap_or_else(|| p.values.clone()),
            },
        );
    }
    let mut memory = BTreeMap::new();
    for node in 0..ckpt.memory.n_nodes() {
        let node = node as NodeIndex;
        memory.insert(
            node_names(node),
            MemoryDoc {
                state: ckpt.memory.get(node).to_vec(),
                last_update: ckpt.memory.last_update(node),
            },
        );
    }
    let doc = CheckpointDoc {
        format: MODEL_CHECKPOINT_FORMAT.to_string(),
        config_echo: config_echo.to_string(),
        encoder: model.cfg,
        epoch: ckpt.epoch,
        time_origin: model.time_origin,
        delta_scale: model.delta_scale,
        params,
        memory,
    };
    let text =
        serde_json::to_string(&doc).map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

pub fn save_checkpoint_path(
    path: &Path,
    model: &TgnModel,
    ckpt: &EpochCheckpoint,
    node_names: impl Fn(NodeIndex) -> String,
    config_echo: &str,
) -> Result<()> {
    save_checkpoint(std::fs::File::create(path)?, model, ckpt, node_names, config_echo)
}

/// Reload a checkpoint into a freshly built model; `node_index` maps
/// snapshot node names back into the current registry.
pub fn load_checkpoint<R: Read>(
    mut r: R,
    model: &mut TgnModel,
    n_nodes: usize,
    node_index: impl Fn(&str) -> Option<NodeIndex>,
) -> Result<(EpochCheckpoint, String)> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let doc: CheckpointDoc =
        serde_json::from_str(&text).map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    if doc.format != MODEL_CHECKPOINT_FORMAT {
        return Err(EncoderError::Checkpoint(format!("unsupported format {:?}", doc.format)));
    }
    if doc.encoder != model.cfg {
        return Err(EncoderError::Checkpoint(format!(
            "encoder config mismatch: checkpoint {:?}, model {:?}",
            doc.encoder, model.cfg
        )));
    }
    model.time_origin = doc.time_origin;
    model.delta_scale = doc.delta_scale;

    let mut params = BTreeMap::new();
    for (name, p) in &doc.params {
        let id = model
            .store
            .lookup(name)
            .ok_or_else(|| EncoderError::Checkpoint(format!("unknown parameter {name:?}")))?;
        if model.store.param(id).shape.dims() != p.shape {
            return Err(EncoderError::Checkpoint(format!("shape mismatch for {name:?}")));
        }
        model.store.values_mut(id).copy_from_slice(&p.values);
        params.insert(name.clone(), p.values.clone());
    }

    let mut memory = MemoryState::new(n_nodes, model.cfg.memory_dim);
    for (name, m) in &doc.memory {
        let Some(node) = node_index(name) else {
            return Err(EncoderError::Checkpoint(format!("unknown node {name:?} in snapshot")));
        };
        memory.set(node, &m.state);
        memory.set_last_update(node, m.last_update);
    }
    Ok((EpochCheckpoint { epoch: doc.epoch, params, memory }, doc.config_echo))
}

pub fn load_checkpoint_path(
    path: &Path,
    model: &mut TgnModel,
    n_nodes: usize,
    node_index: impl Fn(&str) -> Option<NodeIndex>,
) -> Result<(EpochCheckpoint, String)> {
    load_checkpoint(std::fs::File::open(path)?, model, n_nodes, node_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg(d: usize) -> EncoderConfig {
        EncoderConfig { memory_dim: d, time_dim: 4, n_heads: 1, n_layers: 1, n_neighbors: 5 }
    }

    fn toy_model(d: usize, seed: u64) -> TgnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TgnModel::new(toy_cfg(d), &mut rng).unwrap()
    }

    fn event(user: NodeIndex, item: NodeIndex, t: i64, fill: f64) -> InteractionEvent {
        InteractionEvent { user, item, timestamp: t, edge_feature: [fill; EDGE_FEATURE_LEN] }
    }

    #[test]
    fn fresh_node_message_is_zeros_time_feature() {
        let model = toy_model(2, 1);
        let mut tape = Tape::new();
        let s_node = tape.vector(&[0.0, 0.0]);
        let s_other = tape.vector(&[0.0, 0.0]);
        let feat = [0.25; EDGE_FEATURE_LEN];
        let m = build_message(&mut tape, s_node, s_other, 7.0, &feat).unwrap();
        let v = tape.value(m);
        assert_eq!(v.len(), model.cfg.message_width());
        assert_eq!(&v[..4], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(v[4], 7.0);
        assert!(v[5..].iter().all(|&x| x == 0.25));
    }

    #[test]
    fn message_concatenation_is_definitional() {
        let mut tape = Tape::new();
        let s_i = tape.vector(&[1.0, 2.0]);
        let s_j = tape.vector(&[3.0, 4.0]);
        let m = build_message(&mut tape, s_i, s_j, 5.0, &[0.0; EDGE_FEATURE_LEN]).unwrap();
        let v = tape.value(m);
        assert_eq!(&v[..5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(v[5..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn event_at_last_update_time_has_zero_delta() {
        let mut model = toy_model(2, 2);
        model.time_origin = 1000;
        model.delta_scale = 10.0;
        let mut state = TgnState::new(4, 2);
        state.memory.set_last_update(0, 42); // rebased
        let events = vec![event(0, 2, 1042, 0.0)];
        state.push_batch(&events, 0).unwrap();

        let mut tape = Tape::new();
        let leaves = BatchLeaves::on_tape(&mut tape, &model, &model.store).unwrap();
        let mut view = MemoryView::default();
        let applied =
            apply_pending_updates(&mut tape, &model, &state, &events, &leaves, &mut view).unwrap();
        // Δt of node 0 is (1042-1000-42)/10 = 0: its message carries 0
        // in the time slot. The applied list is sorted by node.
        assert_eq!(applied[0].node, 0);
        assert_eq!(applied[0].t_rebased, 42);
    }

    #[test]
    fn aggregation_keeps_the_most_recent_message() {
        let pending = vec![
            PendingEvent { user: 0, item: 5, timestamp: 10, event_idx: 0 },
            PendingEvent { user: 0, item: 6, timestamp: 20, event_idx: 1 },
        ];
        let agg = aggregate_latest(&pending);
        let node0 = agg.iter().find(|m| m.node == 0).unwrap();
        assert_eq!(node0.timestamp, 20);
        assert_eq!(node0.other, 6);
    }

    #[test]
    fn aggregation_ties_go_to_later_batch_position() {
        let pending = vec![
            PendingEvent { user: 0, item: 5, timestamp: 10, event_idx: 0 },
            PendingEvent { user: 0, item: 6, timestamp: 10, event_idx: 1 },
            PendingEvent { user: 0, item: 7, timestamp: 10, event_idx: 2 },
        ];
        let agg = aggregate_latest(&pending);
        let node0 = agg.iter().find(|m| m.node == 0).unwrap();
        assert_eq!(node0.other, 7);
        assert_eq!(agg.len(), 4); // node 0 plus items 5, 6, 7
    }

    #[test]
    fn single_message_aggregates_to_itself() {
        let pending = vec![PendingEvent { user: 1, item: 2, timestamp: 5, event_idx: 9 }];
        let agg = aggregate_latest(&pending);
        assert_eq!(
            agg,
            vec![
                AggregatedMessage { node: 1, other: 2, timestamp: 5, event_idx: 9 },
                AggregatedMessage { node: 2, other: 1, timestamp: 5, event_idx: 9 },
            ]
        );
    }

    #[test]
    fn zero_parameter_updates_halve_touched_memories_only() {
        let mut model = toy_model(2, 3);
        for id in model.store.ids().collect::<Vec<_>>() {
            model.store.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let mut state = TgnState::new(4, 2);
        state.memory.set(0, &[1.0, -2.0]);
        state.memory.set(1, &[0.5, 0.5]);
        state.memory.set(3, &[8.0, 8.0]);
        let events = vec![event(0, 1, 100, 0.0)];
        state.push_batch(&events, 0).unwrap();

        let mut tape = Tape::new();
        let leaves = BatchLeaves::on_tape(&mut tape, &model, &model.store).unwrap();
        let mut view = MemoryView::default();
        let applied =
            apply_pending_updates(&mut tape, &model, &state, &events, &leaves, &mut view).unwrap();
        commit_updates(&tape, &mut state, &applied);

        assert_eq!(state.memory.get(0), &[0.5, -1.0]);
        assert_eq!(state.memory.get(1), &[0.25, 0.25]);
        assert_eq!(state.memory.get(3), &[8.0, 8.0]); // untouched
        assert!(state.pending.is_empty());
    }

    #[test]
    fn update_matches_straight_line_gru_oracle() {
        let model = toy_model(2, 4);
        let mut state = TgnState::new(3, 2);
        state.memory.set(0, &[0.3, -0.4]);
        state.memory.set(1, &[0.1, 0.9]);
        let events = vec![event(0, 1, 50, 0.02)];
        state.push_batch(&events, 0).unwrap();

        let mut tape = Tape::new();
        let leaves = BatchLeaves::on_tape(&mut tape, &model, &model.store).unwrap();
        let mut view = MemoryView::default();
        apply_pending_updates(&mut tape, &model, &state, &events, &leaves, &mut view).unwrap();

        // independent straight-line evaluation for node 0
        let get = |name: &str| model.store.values(model.store.lookup(name).unwrap()).to_vec();
        let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> {
            let cols = v.len();
            (0..m.len() / cols)
                .map(|r| (0..cols).map(|c| m[r * cols + c] * v[c]).sum())
                .collect()
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let h = [0.3, -0.4];
        let mut msg = vec![0.3, -0.4, 0.1, 0.9, 50.0];
        msg.extend_from_slice(&[0.02; EDGE_FEATURE_LEN]);
        let z: Vec<f64> = {
            let a = matvec(&get("memory_gru.w_update"), &msg);
            let b = matvec(&get("memory_gru.u_update"), &h);
            (0..2).map(|i| sig(a[i] + b[i])).collect()
        };
        let r: Vec<f64> = {
            let a = matvec(&get("memory_gru.w_reset"), &msg);
            let b = matvec(&get("memory_gru.u_reset"), &h);
            (0..2).map(|i| sig(a[i] + b[i])).collect()
        };
        let rh: Vec<f64> = (0..2).map(|i| r[i] * h[i]).collect();
        let cand: Vec<f64> = {
            let a = matvec(&get("memory_gru.w_cand"), &msg);
            let b = matvec(&get("memory_gru.u_cand"), &rh);
            (0..2).map(|i| (a[i] + b[i]).tanh()).collect()
        };
        let expect: Vec<f64> = (0..2).map(|i| z[i] * h[i] + (1.0 - z[i]) * cand[i]).collect();

        let got = tape.value(view.updated_tensor(0).unwrap());
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-13, "{g} vs {e}");
        }
    }

    fn embed_at(
        model: &TgnModel,
        state: &TgnState,
        events: &[InteractionEvent],
        node: NodeIndex,
        t: i64,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let leaves = BatchLeaves::on_tape(&mut tape, model, &model.store).unwrap();
        let ctx = EmbedCtx { model, events, neighbors: &state.neighbors, memory: &state.memory };
        let mut view = MemoryView::default();
        let id = embed_node(&mut tape, &ctx, &leaves, &mut view, node, t).unwrap();
        tape.value(id).to_vec()
    }

    #[test]
    fn zero_neighbor_embedding_is_deterministic_self_path() {
        let model = toy_model(4, 5);
        let state = TgnState::new(3, 4);
        let a = embed_at(&model, &state, &[], 0, 100);
        let b = embed_at(&model, &state, &[], 0, 100);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn single_neighbor_gets_full_attention_weight() {
        let model = toy_model(4, 6);
        let mut state = TgnState::new(3, 4);
        let events = vec![event(0, 1, 10, 0.1)];
        state.push_batch(&events, 0).unwrap();
        flush_pending(&model, &mut state, &events).unwrap();

        let mut tape = Tape::new();
        let leaves = BatchLeaves::on_tape(&mut tape, &model, &model.store).unwrap();
        let ctx =
            EmbedCtx { model: &model, events: &events, neighbors: &state.neighbors, memory: &state.memory };
        let mut view = MemoryView::default();
        let (_, attns) =
            embed_node_debug(&mut tape, &ctx, &leaves, &mut view, 0, 50).unwrap();
        assert_eq!(attns.len(), 1);
        assert_eq!(tape.value(attns[0]), &[1.0]);
    }

    #[test]
    fn attention_weights_sum_to_one_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = EncoderConfig { memory_dim: 8, time_dim: 4, n_heads: 2, n_layers: 1, n_neighbors: 10 };
        let model = TgnModel::new(cfg, &mut rng).unwrap();
        let mut state = TgnState::new(6, 8);
        let events: Vec<InteractionEvent> =
            (0..5).map(|k| event(0, 1 + (k % 3), 10 * (k as i64 + 1), 0.05 * k as f64)).collect();
        state.push_batch(&events, 0).unwrap();
        flush_pending(&model, &mut state, &events).unwrap();

        let mut tape = Tape::new();
        let leaves = BatchLeaves::on_tape(&mut tape, &model, &model.store).unwrap();
        let ctx =
            EmbedCtx { model: &model, events: &events, neighbors: &state.neighbors, memory: &state.memory };
        let mut view = MemoryView::default();
        let (_, attns) = embed_node_debug(&mut tape, &ctx, &leaves, &mut view, 0, 1000).unwrap();
        assert_eq!(attns.len(), 1);
        let w = tape.value(attns[0]);
        let rows = w.len() / 2;
        for h in 0..2 {
            let col_sum: f64 = (0..rows).map(|r| w[r * 2 + h]).sum();
            assert!((col_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn phi_zero_is_cos_of_phase_exactly() {
        let model = toy_model(4, 8);
        let mut tape = Tape::new();
        let leaves = BatchLeaves::on_tape(&mut tape, &model, &model.store).unwrap();
        // phase initializes to zero, so φ(0) is all ones
        assert_eq!(tape.value(leaves.phi_zero), &[1.0; 4]);
        let phi = leaves.time_phi(&mut tape, 3.7).unwrap();
        for &v in tape.value(phi) {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn one_layer_one_head_embedding_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = EncoderConfig { memory_dim: 4, time_dim: 4, n_heads: 1, n_layers: 1, n_neighbors: 10 };
        let mut model = TgnModel::new(cfg, &mut rng).unwrap();
        model.delta_scale = 10.0;
        let mut state = TgnState::new(6, 4);
        for n in 0..6u32 {
            let vals: Vec<f64> = (0..4).map(|k| 0.1 * (n as f64 + 1.0) - 0.05 * k as f64).collect();
            state.memory.set(n, &vals);
        }
        let events: Vec<InteractionEvent> = vec![
            event(0, 3, 10, 0.01),
            event(0, 4, 20, -0.02),
            event(1, 3, 30, 0.005),
            event(0, 5, 40, 0.03),
        ];
        for (i, e) in events.iter().enumerate() {
            state.neighbors.insert(i as u32, e);
        }

        let got = embed_at(&model, &state, &events, 0, 100);

        // Straight-line reimplementation of the attention arithmetic.
        let get = |name: &str| model.store.values(model.store.lookup(name).unwrap()).to_vec();
        let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> {
            let cols = v.len();
            (0..m.len() / cols)
                .map(|r| (0..cols).map(|c| m[r * cols + c] * v[c]).sum())
                .collect()
        };
        let omega = get("time.omega");
        let phi = |dt: f64| -> Vec<f64> { omega.iter().map(|w| (w * dt).cos()).collect() };

        let h0 = state.memory.get(0).to_vec();
        let mut query_in = h0.clone();
        query_in.extend(phi(0.0));
        let q = matvec(&get("attn1.w_query"), &query_in);

        // neighbors of node 0 before t=100, newest first
        let nbrs = [(5u32, 40i64, 0.03f64), (4, 20, -0.02), (3, 10, 0.01)];
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        for &(j, tj, fill) in &nbrs {
            let mut row = state.memory.get(j).to_vec();
            row.extend_from_slice(&[fill; EDGE_FEATURE_LEN]);
            row.extend(phi((100 - tj) as f64 / 10.0));
            keys.push(matvec(&get("attn1.w_key"), &row));
            vals.push(matvec(&get("attn1.w_value"), &row));
        }
        let scale = 1.0 / (4.0f64).sqrt();
        let scores: Vec<f64> =
            keys.iter().map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let attn: Vec<f64> = (0..4)
            .map(|c| exps.iter().zip(&vals).map(|(e, v)| e / z * v[c]).sum())
            .collect();
        let mut combined = h0.clone();
        combined.extend(attn);
        let w1 = get("attn1.mlp_w1");
        let b1 = get("attn1.mlp_b1");
        let hid: Vec<f64> = matvec(&w1, &combined)
            .iter()
            .zip(&b1)
            .map(|(x, b)| (x + b).tanh())
            .collect();
        let b2 = get("attn1.mlp_b2");
        let expect: Vec<f64> =
            matvec(&get("attn1.mlp_w2"), &hid).iter().zip(&b2).map(|(x, b)| x + b).collect();

        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "got {g}, want {e}");
        }
    }

    #[test]
    fn out_of_order_batches_are_rejected() {
        let mut state = TgnState::new(4, 2);
        state.push_batch(&[event(0, 1, 100, 0.0)], 0).unwrap();
        let err = state.push_batch(&[event(0, 1, 50, 0.0)], 1);
        assert!(matches!(err, Err(EncoderError::OutOfOrderBatch { .. })));
    }

    #[test]
    fn checkpoint_round_trip_reproduces_embeddings() {
        let mut model = toy_model(4, 30);
        model.time_origin = 500;
        model.delta_scale = 25.0;
        let mut state = TgnState::new(3, 4);
        let events = vec![event(0, 1, 510, 0.02), event(0, 2, 540, -0.01)];
        state.push_batch(&events, 0).unwrap();
        flush_pending(&model, &mut state, &events).unwrap();

        let before = embed_at(&model, &state, &events, 0, 600);

        let ckpt = EpochCheckpoint {
            epoch: 3,
            params: model.store.snapshot_values(),
            memory: state.memory.clone(),
        };
        let names = ["n0", "n1", "n2"];
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &model, &ckpt, |n| names[n as usize].to_string(), "cfg-echo")
            .unwrap();

        let mut model2 = toy_model(4, 31); // different random init
        let (loaded, echo) = load_checkpoint(buf.as_slice(), &mut model2, 3, |name| {
            names.iter().position(|&n| n == name).map(|i| i as NodeIndex)
        })
        .unwrap();
        assert_eq!(echo, "cfg-echo");
        assert_eq!(loaded.epoch, 3);

        let mut state2 = TgnState::new(3, 4);
        state2.memory = loaded.memory;
        state2.push_batch(&events, 0).unwrap();
        state2.pending.clear(); // edges only; memory came from the snapshot

        let after = embed_at(&model2, &state2, &events, 0, 600);
        assert_eq!(before, after);
    }
}
