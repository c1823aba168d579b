//! Multi-task training: the pairwise ranking loss, the Sharpe-driven
//! contrastive loss, their weighted combination, the chronological
//! epoch loop and validation-rank model selection.
//!
//! Every epoch resets memory to zero and replays the training events in
//! time-ordered batches; per batch the order is embed → losses →
//! backward → optimizer step, with memory updates recorded on the next
//! batch's tape (see the encoder module). Batch losses are means over
//! the batch's interactions; interactions with an empty negative pool
//! or an empty contrastive pair contribute only their available term.

use crate::config::{derive_seed_indexed, RunConfig};
use crate::encoder::{
    advance_clock, apply_pending_updates, commit_updates, embed_node, flush_pending, BatchLeaves,
    EmbedCtx, EncoderError, EpochCheckpoint, MemoryView, TgnModel, TgnState,
};
use crate::events::{Dataset, InteractionEvent, NodeIndex};
use crate::market::SharpeConfig;
use crate::sampler::{
    interacted_items, sample_candidates, sample_without_replacement, select_pairs,
    PortfolioScorer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::ops::Range;
use tgrec_tensor::{AdamConfig, ParamError, ParameterStore, Tape, TensorError, TensorId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}; recent batch losses: {recent}")]
    NanLoss { epoch: usize, batch: usize, recent: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Training knobs, a view over the run configuration.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub bpr_negatives: usize,
    pub alpha: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub candidate_set_size: usize,
    pub n_potential_positives: usize,
    pub n_contrastive_negatives: usize,
    pub sharpe: SharpeConfig,
    pub seed: u64,
}

impl From<&RunConfig> for TrainSettings {
    fn from(cfg: &RunConfig) -> Self {
        TrainSettings {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            bpr_negatives: cfg.bpr_negatives,
            alpha: cfg.alpha,
            tau: cfg.tau,
            learning_rate: cfg.learning_rate,
            candidate_set_size: cfg.candidate_set_size,
            n_potential_positives: cfg.n_potential_positives,
            n_contrastive_negatives: cfg.n_contrastive_negatives,
            sharpe: cfg.sharpe(),
            seed: cfg.seed,
        }
    }
}

// ----------------------------------------------------------------------
// Loss functions
// ----------------------------------------------------------------------

/// Mean over negatives of `−log σ(z_u·z_o − z_u·z_x)`.
pub fn bpr_loss(
    tape: &mut Tape,
    z_user: TensorId,
    z_pos: TensorId,
    z_negs: &[TensorId],
) -> std::result::Result<TensorId, TensorError> {
    let pos = tape.dot(z_user, z_pos)?;
    let mut terms = Vec::with_capacity(z_negs.len());
    for &zx in z_negs {
        let neg = tape.dot(z_user, zx)?;
        let margin = tape.sub(pos, neg)?;
        let ls = tape.log_sigmoid(margin)?;
        terms.push(tape.neg(ls)?);
    }
    tape.mean_of(&terms)
}

/// `−[logsumexp_p(s_p/τ) − logsumexp_n(s_n/τ)]` over raw similarity
/// scalars; may be negative by construction.
pub fn contrastive_from_sims(
    tape: &mut Tape,
    sims_pos: &[TensorId],
    sims_neg: &[TensorId],
    tau: f64,
) -> std::result::Result<TensorId, TensorError> {
    let lse = |tape: &mut Tape, sims: &[TensorId]| -> std::result::Result<TensorId, TensorError> {
        let scaled: Vec<TensorId> = sims
            .iter()
            .map(|&s| tape.scale(s, 1.0 / tau))
            .collect::<std::result::Result<_, _>>()?;
        let cat = tape.concat(&scaled)?;
        tape.log_sum_exp(cat)
    };
    let lse_p = lse(tape, sims_pos)?;
    let lse_n = lse(tape, sims_neg)?;
    tape.sub(lse_n, lse_p)
}

/// Contrastive loss over embeddings with cosine similarity.
pub fn contrastive_loss(
    tape: &mut Tape,
    z_user: TensorId,
    z_pos: &[TensorId],
    z_neg: &[TensorId],
    tau: f64,
) -> std::result::Result<TensorId, TensorError> {
    let sims = |tape: &mut Tape, zs: &[TensorId]| -> std::result::Result<Vec<TensorId>, TensorError> {
        zs.iter().map(|&z| tape.cosine_sim(z_user, z)).collect()
    };
    let sp = sims(tape, z_pos)?;
    let sn = sims(tape, z_neg)?;
    contrastive_from_sims(tape, &sp, &sn, tau)
}

/// `(1−α)·l_bpr + α·l_cl`; a missing term contributes nothing beyond
/// the available one.
pub fn joint_loss(
    tape: &mut Tape,
    l_bpr: Option<TensorId>,
    l_cl: Option<TensorId>,
    alpha: f64,
) -> std::result::Result<Option<TensorId>, TensorError> {
    Ok(match (l_bpr, l_cl) {
        (Some(b), Some(c)) => {
            let sb = tape.scale(b, 1.0 - alpha)?;
            let sc = tape.scale(c, alpha)?;
            Some(tape.add(sb, sc)?)
        }
        (Some(b), None) => Some(tape.scale(b, 1.0 - alpha)?),
        (None, Some(c)) => Some(tape.scale(c, alpha)?),
        (None, None) => None,
    })
}

/// Up to `k` uniform draws from batch items the user has not interacted
/// with up to and including `t`.
pub fn sample_bpr_negatives<R: rand::Rng>(
    ledger: &crate::events::PortfolioLedger,
    user: NodeIndex,
    t: i64,
    batch_items: &[NodeIndex],
    k: usize,
    rng: &mut R,
) -> Vec<NodeIndex> {
    let excluded = interacted_items(ledger, user, t);
    let pool: Vec<NodeIndex> =
        batch_items.iter().copied().filter(|i| !excluded.contains(i)).collect();
    sample_without_replacement(&pool, k, rng)
}

// ----------------------------------------------------------------------
// Training loop
// ----------------------------------------------------------------------

/// Build the per-interaction joint-loss terms for one batch: embed the
/// endpoints, sample ranking negatives and contrastive pairs, and wire
/// up the weighted loss. Terms for interactions with nothing available
/// are simply absent.
#[allow(clippy::too_many_arguments)]
fn batch_loss_terms(
    tape: &mut Tape,
    model: &TgnModel,
    leaves: &BatchLeaves,
    view: &mut MemoryView,
    state: &TgnState,
    dataset: &Dataset,
    chunk: &[InteractionEvent],
    chunk_offset: usize,
    settings: &TrainSettings,
    epoch: usize,
) -> Result<Vec<TensorId>> {
    let batch_items: Vec<NodeIndex> = {
        let set: BTreeSet<NodeIndex> = chunk.iter().map(|e| e.item).collect();
        set.into_iter().collect()
    };
    let ctx = EmbedCtx {
        model,
        events: &dataset.events,
        neighbors: &state.neighbors,
        memory: &state.memory,
    };

    let mut terms = Vec::with_capacity(chunk.len());
    for (k, e) in chunk.iter().enumerate() {
        let pos = (chunk_offset + k) as u64;
        let z_u = embed_node(tape, &ctx, leaves, view, e.user, e.timestamp)?;

        let l_bpr = if settings.alpha < 1.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(
                settings.seed,
                &format!("train/bpr/{epoch}"),
                pos,
            ));
            let negs = sample_bpr_negatives(
                &dataset.ledger,
                e.user,
                e.timestamp,
                &batch_items,
                settings.bpr_negatives,
                &mut rng,
            );
            if negs.is_empty() {
                None
            } else {
                let z_o = embed_node(tape, &ctx, leaves, view, e.item, e.timestamp)?;
                let z_xs: Vec<TensorId> = negs
                    .iter()
                    .map(|&x| embed_node(tape, &ctx, leaves, view, x, e.timestamp))
                    .collect::<std::result::Result<_, _>>()?;
                Some(bpr_loss(tape, z_u, z_o, &z_xs)?)
            }
        } else {
            None
        };

        let l_cl = if settings.alpha > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(
                settings.seed,
                &format!("train/cand/{epoch}"),
                pos,
            ));
            let candidates = sample_candidates(
                &dataset.ledger,
                e.user,
                e.timestamp,
                &batch_items,
                e.item,
                settings.candidate_set_size,
                &mut rng,
            );
            if candidates.len() < 2 {
                None
            } else {
                let held = dataset.ledger.portfolio_at(e.user, e.timestamp);
                let day = crate::events::day_of_timestamp(e.timestamp);
                let scorer = PortfolioScorer::new(
                    &dataset.returns,
                    settings.sharpe,
                    day,
                    held.iter().map(|&i| dataset.registry.name(i)),
                );
                let scored =
                    scorer.score_all(candidates.iter().map(|&c| (c, dataset.registry.name(c))));
                let pair = select_pairs(
                    &scored,
                    settings.n_potential_positives,
                    settings.n_contrastive_negatives,
                    |i| dataset.registry.name(i).to_string(),
                );
                if pair.is_empty() {
                    None
                } else {
                    let z_ps: Vec<TensorId> = pair
                        .positives
                        .iter()
                        .map(|&i| embed_node(tape, &ctx, leaves, view, i, e.timestamp))
                        .collect::<std::result::Result<_, _>>()?;
                    let z_ns: Vec<TensorId> = pair
                        .negatives
                        .iter()
                        .map(|&i| embed_node(tape, &ctx, leaves, view, i, e.timestamp))
                        .collect::<std::result::Result<_, _>>()?;
                    Some(contrastive_loss(tape, z_u, &z_ps, &z_ns, settings.tau)?)
                }
            }
        } else {
            None
        };

        if let Some(term) = joint_loss(tape, l_bpr, l_cl, settings.alpha)? {
            terms.push(term);
        }
    }
    Ok(terms)
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_secs: f64,
}

pub struct TrainOutput {
    /// One checkpoint per epoch (or a single untrained one for zero
    /// epochs), memory flushed through the end of the training split.
    pub checkpoints: Vec<EpochCheckpoint>,
    pub log: Vec<EpochLog>,
}

/// Run the epoch loop over `dataset.events[range]`. The model's
/// parameter store is trained in place; per-epoch snapshots land in the
/// output. Batches replay chronologically, memory resets every epoch.
pub fn train(
    dataset: &Dataset,
    range: Range<usize>,
    model: &mut TgnModel,
    settings: &TrainSettings,
) -> Result<TrainOutput> {
    let train_events = &dataset.events[range.clone()];
    model.set_time_stats(train_events);
    let adam = AdamConfig { learning_rate: settings.learning_rate, ..AdamConfig::default() };
    let n_nodes = dataset.n_nodes();
    let dim = model.cfg.memory_dim;

    let mut checkpoints = Vec::new();
    let mut log = Vec::new();

    if settings.epochs == 0 {
        checkpoints.push(EpochCheckpoint {
            epoch: 0,
            params: model.store.snapshot_values(),
            memory: crate::encoder::MemoryState::new(n_nodes, dim),
        });
        return Ok(TrainOutput { checkpoints, log });
    }

    for epoch in 1..=settings.epochs {
        let started = std::time::Instant::now();
        let mut state = TgnState::new(n_nodes, dim);
        let mut loss_sum = 0.0;
        let mut recent: Vec<f64> = Vec::new();

        for (batch_idx, chunk) in train_events.chunks(settings.batch_size).enumerate() {
            let first_global = range.start + batch_idx * settings.batch_size;
            let mut tape = Tape::new();
            let leaves = BatchLeaves::on_tape(&mut tape, model, &model.store)?;
            let mut view = MemoryView::default();
            let applied =
                apply_pending_updates(&mut tape, model, &state, &dataset.events, &leaves, &mut view)?;

            let terms = batch_loss_terms(
                &mut tape,
                model,
                &leaves,
                &mut view,
                &state,
                dataset,
                chunk,
                batch_idx * settings.batch_size,
                settings,
                epoch,
            )?;

            if !terms.is_empty() {
                let total = tape.add_n(&terms)?;
                let batch_loss = tape.scale(total, 1.0 / chunk.len() as f64)?;
                let value = tape.scalar_value(batch_loss);
                if !value.is_finite() {
                    return Err(TrainError::NanLoss {
                        epoch,
                        batch: batch_idx,
                        recent: recent
                            .iter()
                            .rev()
                            .take(5)
                            .map(|v| format!("{v:.6}"))
                            .collect::<Vec<_>>()
                            .join(", "),
                    });
                }
                loss_sum += value * chunk.len() as f64;
                recent.push(value);
                tape.backward(batch_loss, &mut model.store)?;
                model.store.optimizer_step(&adam);
            }

            commit_updates(&tape, &mut state, &applied);
            state.push_batch(chunk, first_global as u32)?;
        }

        flush_pending(model, &mut state, &dataset.events)?;
        checkpoints.push(EpochCheckpoint {
            epoch,
            params: model.store.snapshot_values(),
            memory: state.memory.clone(),
        });
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / train_events.len().max(1) as f64,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutput { checkpoints, log })
}

/// The joint loss of a whole event span recorded on one tape: memory
/// updates chain through tape tensors instead of detaching at batch
/// boundaries, so one backward pass differentiates the full unroll.
/// This is the loss the finite-difference audit checks. `store`
/// supplies parameter values (the model's own store, or a perturbed
/// copy during the audit); the mean is over contributing interactions.
pub fn unrolled_joint_loss(
    tape: &mut Tape,
    dataset: &Dataset,
    range: Range<usize>,
    model: &TgnModel,
    store: &ParameterStore,
    settings: &TrainSettings,
) -> Result<Option<TensorId>> {
    let mut state = TgnState::new(dataset.n_nodes(), model.cfg.memory_dim);
    let leaves = BatchLeaves::on_tape(tape, model, store)?;
    let mut view = MemoryView::default();
    let mut terms = Vec::new();
    let events = &dataset.events[range.clone()];
    for (batch_idx, chunk) in events.chunks(settings.batch_size).enumerate() {
        let applied = apply_pending_updates(tape, model, &state, &dataset.events, &leaves, &mut view)?;
        advance_clock(&mut state, &applied);
        terms.extend(batch_loss_terms(
            tape,
            model,
            &leaves,
            &mut view,
            &state,
            dataset,
            chunk,
            batch_idx * settings.batch_size,
            settings,
            1,
        )?);
        state.push_batch(chunk, (range.start + batch_idx * settings.batch_size) as u32)?;
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let total = tape.add_n(&terms)?;
    Ok(Some(tape.scale(total, 1.0 / terms.len() as f64)?))
}

// ----------------------------------------------------------------------
// Model selection
// ----------------------------------------------------------------------

/// Validation metrics of one checkpoint.
#[derive(Clone, Copy, Debug)]
pub struct SelectionRow {
    pub epoch: usize,
    pub hr5: f64,
    pub p_sr5: f64,
}

/// Rank checkpoints on each metric (1 = best, competition ranking on
/// ties) and pick the smallest average rank; ties go to the earlier
/// epoch. Returns an index into `rows`.
pub fn select_model(rows: &[SelectionRow]) -> usize {
    assert!(!rows.is_empty(), "select_model needs at least one checkpoint");
    let rank_of = |values: &[f64], i: usize| -> f64 {
        (1 + values.iter().filter(|&&v| v > values[i]).count()) as f64
    };
    let hr: Vec<f64> = rows.iter().map(|r| r.hr5).collect();
    let psr: Vec<f64> = rows.iter().map(|r| r.p_sr5).collect();
    let mut best = 0;
    let mut best_key = (f64::INFINITY, usize::MAX);
    for (i, row) in rows.iter().enumerate() {
        let avg = (rank_of(&hr, i) + rank_of(&psr, i)) / 2.0;
        let key = (avg, row.epoch);
        if key < best_key {
            best_key = key;
            best = i;
        }
    }
    best
}
