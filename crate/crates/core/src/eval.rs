//! Recommendation metrics (HR@k, NDCG@k), investment metrics (ΔR, ΔSR,
//! P(R), P(SR)), the per-interaction ranking protocol and the static
//! price/popularity baselines.
//!
//! Every test interaction gets a fresh candidate ranking built from its
//! batch; the true item plus up to `eval_negatives` items the user never
//! interacted with. Investment quality compares the user's equal-weight
//! portfolio before and after adding the top-k recommendations, on the
//! trailing return window at the interaction time (in-sample by design:
//! scoring future returns would drown the comparison in market noise).

use crate::config::fmt_sig;
use crate::encoder::{
    embed_node, flush_pending, BatchLeaves, EmbedCtx, EncoderError, EpochCheckpoint, MemoryView,
    TgnModel, TgnState,
};
use crate::events::{day_of_timestamp, Dataset, InteractionEvent, NodeIndex};
use crate::market::{annualized_mean_return, sharpe_ratio, SharpeConfig};
use crate::sampler::{interacted_items, sample_without_replacement};
use crate::trainer::SelectionRow;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use tgrec_tensor::Tape;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Param(#[from] tgrec_tensor::ParamError),
    #[error(transparent)]
    Tensor(#[from] tgrec_tensor::TensorError),
}

type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Copy, Debug)]
pub struct EvalSettings {
    pub eval_negatives: usize,
    pub sharpe: SharpeConfig,
    pub seed: u64,
    pub batch_size: usize,
}

// ----------------------------------------------------------------------
// Ranking
// ----------------------------------------------------------------------

/// Candidates ordered best-first with their scores.
#[derive(Clone, Debug)]
pub struct RankedList {
    pub items: Vec<NodeIndex>,
    pub scores: Vec<f64>,
}

/// Sort candidates by score descending, item id ascending on ties.
pub fn rank_by_scores(
    candidates: &[NodeIndex],
    score_of: impl Fn(NodeIndex) -> f64,
    name_of: impl Fn(NodeIndex) -> String,
) -> RankedList {
    let mut order: Vec<(NodeIndex, f64)> =
        candidates.iter().map(|&c| (c, score_of(c))).collect();
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).expect("finite scores").then_with(|| name_of(a.0).cmp(&name_of(b.0)))
    });
    RankedList { items: order.iter().map(|x| x.0).collect(), scores: order.iter().map(|x| x.1).collect() }
}

/// 1-based rank of the true item, if present.
fn rank_of(ranked: &RankedList, true_item: NodeIndex) -> Option<usize> {
    ranked.items.iter().position(|&i| i == true_item).map(|p| p + 1)
}

pub fn hit_at_k(ranked: &RankedList, true_item: NodeIndex, k: usize) -> bool {
    rank_of(ranked, true_item).map(|r| r <= k).unwrap_or(false)
}

/// Single-relevant-item NDCG: `1/log2(rank+1)` inside the cutoff, 0
/// outside (the ideal ranking scores exactly 1).
pub fn ndcg_at_k(ranked: &RankedList, true_item: NodeIndex, k: usize) -> f64 {
    match rank_of(ranked, true_item) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// The true item plus up to `n_negatives` batch items the user never
/// interacted with up to `t`; `None` when no eligible negative exists
/// (the interaction is excluded and counted).
pub fn build_eval_candidates<R: rand::Rng>(
    ledger: &crate::events::PortfolioLedger,
    user: NodeIndex,
    t: i64,
    true_item: NodeIndex,
    batch_items: &[NodeIndex],
    n_negatives: usize,
    rng: &mut R,
) -> Option<Vec<NodeIndex>> {
    let excluded = interacted_items(ledger, user, t);
    let pool: Vec<NodeIndex> = batch_items
        .iter()
        .copied()
        .filter(|&i| i != true_item && !excluded.contains(&i))
        .collect();
    if pool.is_empty() {
        return None;
    }
    let mut candidates = vec![true_item];
    candidates.extend(sample_without_replacement(&pool, n_negatives, rng));
    Some(candidates)
}

// ----------------------------------------------------------------------
// Verdicts
// ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RecVerdict {
    pub hit3: bool,
    pub hit5: bool,
    pub ndcg3: f64,
    pub ndcg5: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct InvVerdict {
    pub init_return: f64,
    pub init_sharpe: f64,
    pub delta_r3: f64,
    pub delta_sr3: f64,
    pub delta_r5: f64,
    pub delta_sr5: f64,
    pub improved_r3: bool,
    pub improved_sr3: bool,
    pub improved_r5: bool,
    pub improved_sr5: bool,
}

/// Per-interaction outcome; `None` marks exclusion from that metric
/// family (counted in the report).
#[derive(Clone, Debug, Serialize)]
pub struct InteractionVerdict {
    pub event_index: usize,
    pub user: NodeIndex,
    pub rec: Option<RecVerdict>,
    pub inv: Option<InvVerdict>,
}

fn rec_verdict(ranked: &RankedList, true_item: NodeIndex) -> RecVerdict {
    RecVerdict {
        hit3: hit_at_k(ranked, true_item, 3),
        hit5: hit_at_k(ranked, true_item, 5),
        ndcg3: ndcg_at_k(ranked, true_item, 3),
        ndcg5: ndcg_at_k(ranked, true_item, 5),
    }
}

/// Compare the user's equal-weight portfolio before and after adding
/// the top-k recommendations, both on the trailing window at `t`.
/// `None` when the initial portfolio is empty or any needed window is
/// unscorable (insufficient history or zero volatility).
pub fn investment_verdict(
    dataset: &Dataset,
    user: NodeIndex,
    t: i64,
    ranked: &RankedList,
    cfg: &SharpeConfig,
) -> Option<InvVerdict> {
    let held = dataset.ledger.portfolio_at(user, t);
    if held.is_empty() {
        return None;
    }
    let day = day_of_timestamp(t);
    let window_of = |extra: &[NodeIndex]| -> Option<(f64, f64)> {
        let portfolio = crate::market::EqualWeightPortfolio::new(
            held.iter()
                .chain(extra.iter())
                .map(|&i| dataset.registry.name(i).to_string())
                .collect::<BTreeSet<String>>(),
        )
        .ok()?;
        let window = dataset.returns.portfolio_window(&portfolio, day, cfg.window_days).ok()?;
        let ret = annualized_mean_return(&window, cfg).ok()?;
        let sharpe = sharpe_ratio(&window, cfg).ok()?;
        Some((ret, sharpe))
    };

    let (init_return, init_sharpe) = window_of(&[])?;
    let top3: Vec<NodeIndex> = ranked.items.iter().copied().take(3).collect();
    let top5: Vec<NodeIndex> = ranked.items.iter().copied().take(5).collect();
    let (r3, sr3) = window_of(&top3)?;
    let (r5, sr5) = window_of(&top5)?;
    Some(InvVerdict {
        init_return,
        init_sharpe,
        delta_r3: r3 - init_return,
        delta_sr3: sr3 - init_sharpe,
        delta_r5: r5 - init_return,
        delta_sr5: sr5 - init_sharpe,
        improved_r3: r3 > init_return,
        improved_sr3: sr3 > init_sharpe,
        improved_r5: r5 > init_return,
        improved_sr5: sr5 > init_sharpe,
    })
}

// ----------------------------------------------------------------------
// Aggregation
// ----------------------------------------------------------------------

/// One set of aggregate metrics (either per-interaction or per-user).
#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq)]
pub struct AggBlock {
    pub hr3: f64,
    pub ndcg3: f64,
    pub hr5: f64,
    pub ndcg5: f64,
    pub delta_r3: f64,
    pub p_r3: f64,
    pub delta_sr3: f64,
    pub p_sr3: f64,
    pub delta_r5: f64,
    pub p_r5: f64,
    pub delta_sr5: f64,
    pub p_sr5: f64,
}

struct RecAcc {
    hr3: f64,
    ndcg3: f64,
    hr5: f64,
    ndcg5: f64,
    n: usize,
}

struct InvAcc {
    dr3: f64,
    pr3: f64,
    dsr3: f64,
    psr3: f64,
    dr5: f64,
    pr5: f64,
    dsr5: f64,
    psr5: f64,
    n: usize,
}

impl RecAcc {
    fn new() -> Self {
        RecAcc { hr3: 0.0, ndcg3: 0.0, hr5: 0.0, ndcg5: 0.0, n: 0 }
    }
    fn push(&mut self, r: &RecVerdict) {
        self.hr3 += r.hit3 as u8 as f64;
        self.ndcg3 += r.ndcg3;
        self.hr5 += r.hit5 as u8 as f64;
        self.ndcg5 += r.ndcg5;
        self.n += 1;
    }
}

impl InvAcc {
    fn new() -> Self {
        InvAcc { dr3: 0.0, pr3: 0.0, dsr3: 0.0, psr3: 0.0, dr5: 0.0, pr5: 0.0, dsr5: 0.0, psr5: 0.0, n: 0 }
    }
    fn push(&mut self, v: &InvVerdict) {
        self.dr3 += v.delta_r3;
        self.pr3 += v.improved_r3 as u8 as f64;
        self.dsr3 += v.delta_sr3;
        self.psr3 += v.improved_sr3 as u8 as f64;
        self.dr5 += v.delta_r5;
        self.pr5 += v.improved_r5 as u8 as f64;
        self.dsr5 += v.delta_sr5;
        self.psr5 += v.improved_sr5 as u8 as f64;
        self.n += 1;
    }
}

fn block_from(rec: &RecAcc, inv: &InvAcc) -> AggBlock {
    let rn = rec.n.max(1) as f64;
    let inn = inv.n.max(1) as f64;
    AggBlock {
        hr3: rec.hr3 / rn,
        ndcg3: rec.ndcg3 / rn,
        hr5: rec.hr5 / rn,
        ndcg5: rec.ndcg5 / rn,
        delta_r3: inv.dr3 / inn,
        p_r3: inv.pr3 / inn,
        delta_sr3: inv.dsr3 / inn,
        p_sr3: inv.psr3 / inn,
        delta_r5: inv.dr5 / inn,
        p_r5: inv.pr5 / inn,
        delta_sr5: inv.dsr5 / inn,
        p_sr5: inv.psr5 / inn,
    }
}

/// Aggregated metrics plus exclusion accounting and the config echo.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub label: String,
    pub seed: u64,
    pub total_interactions: usize,
    pub rec_evaluated: usize,
    pub rec_excluded: usize,
    pub inv_evaluated: usize,
    pub inv_excluded: usize,
    /// Means over evaluated interactions (the headline mode).
    pub per_interaction: AggBlock,
    /// Per-user means first, then averaged across users.
    pub per_user: AggBlock,
    pub config_echo: String,
}

/// Build the report from verdicts in both aggregation modes.
pub fn aggregate(
    label: &str,
    verdicts: &[InteractionVerdict],
    seed: u64,
    config_echo: &str,
) -> MetricsReport {
    let mut rec = RecAcc::new();
    let mut inv = InvAcc::new();
    for v in verdicts {
        if let Some(r) = &v.rec {
            rec.push(r);
        }
        if let Some(i) = &v.inv {
            inv.push(i);
        }
    }
    let per_interaction = block_from(&rec, &inv);

    // per-user mode: average inside each user, then across users
    let mut by_user: BTreeMap<NodeIndex, (RecAcc, InvAcc)> = BTreeMap::new();
    for v in verdicts {
        let entry = by_user.entry(v.user).or_insert_with(|| (RecAcc::new(), InvAcc::new()));
        if let Some(r) = &v.rec {
            entry.0.push(r);
        }
        if let Some(i) = &v.inv {
            entry.1.push(i);
        }
    }
    let mut per_user = AggBlock::default();
    let mut n_rec_users = 0usize;
    let mut n_inv_users = 0usize;
    for (ur, ui) in by_user.values() {
        if ur.n > 0 {
            let n = ur.n as f64;
            per_user.hr3 += ur.hr3 / n;
            per_user.ndcg3 += ur.ndcg3 / n;
            per_user.hr5 += ur.hr5 / n;
            per_user.ndcg5 += ur.ndcg5 / n;
            n_rec_users += 1;
        }
        if ui.n > 0 {
            let n = ui.n as f64;
            per_user.delta_r3 += ui.dr3 / n;
            per_user.p_r3 += ui.pr3 / n;
            per_user.delta_sr3 += ui.dsr3 / n;
            per_user.p_sr3 += ui.psr3 / n;
            per_user.delta_r5 += ui.dr5 / n;
            per_user.p_r5 += ui.pr5 / n;
            per_user.delta_sr5 += ui.dsr5 / n;
            per_user.p_sr5 += ui.psr5 / n;
            n_inv_users += 1;
        }
    }
    if n_rec_users > 0 {
        let n = n_rec_users as f64;
        per_user.hr3 /= n;
        per_user.ndcg3 /= n;
        per_user.hr5 /= n;
        per_user.ndcg5 /= n;
    }
    if n_inv_users > 0 {
        let n = n_inv_users as f64;
        per_user.delta_r3 /= n;
        per_user.p_r3 /= n;
        per_user.delta_sr3 /= n;
        per_user.p_sr3 /= n;
        per_user.delta_r5 /= n;
        per_user.p_r5 /= n;
        per_user.delta_sr5 /= n;
        per_user.p_sr5 /= n;
    }

    MetricsReport {
        label: label.to_string(),
        seed,
        total_interactions: verdicts.len(),
        rec_evaluated: rec.n,
        rec_excluded: verdicts.len() - rec.n,
        inv_evaluated: inv.n,
        inv_excluded: verdicts.len() - inv.n,
        per_interaction,
        per_user,
        config_echo: config_echo.to_string(),
    }
}

// ----------------------------------------------------------------------
// Model evaluation replay
// ----------------------------------------------------------------------

fn sorted_batch_items(chunk: &[InteractionEvent]) -> Vec<NodeIndex> {
    let set: BTreeSet<NodeIndex> = chunk.iter().map(|e| e.item).collect();
    set.into_iter().collect()
}

/// Replay a span of events forward-only, updating memory and edges.
fn replay_span(
    model: &TgnModel,
    state: &mut TgnState,
    dataset: &Dataset,
    range: Range<usize>,
    batch_size: usize,
) -> Result<()> {
    let mut start = range.start;
    while start < range.end {
        let end = (start + batch_size).min(range.end);
        state.push_batch(&dataset.events[start..end], start as u32)?;
        flush_pending(model, state, &dataset.events)?;
        start = end;
    }
    Ok(())
}

/// Inner-product scores of the user against each candidate at time `t`,
/// all embedded from the current (pre-batch) state.
fn model_scores(
    model: &TgnModel,
    state: &TgnState,
    dataset: &Dataset,
    user: NodeIndex,
    t: i64,
    candidates: &[NodeIndex],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let leaves = BatchLeaves::on_tape(&mut tape, model, &model.store)?;
    let ctx = EmbedCtx {
        model,
        events: &dataset.events,
        neighbors: &state.neighbors,
        memory: &state.memory,
    };
    let mut view = MemoryView::default();
    let z_u = embed_node(&mut tape, &ctx, &leaves, &mut view, user, t)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let z_c = embed_node(&mut tape, &ctx, &leaves, &mut view, c, t)?;
        let s = tape.dot(z_u, z_c)?;
        scores.push(tape.scalar_value(s));
    }
    Ok(scores)
}

/// Evaluate one checkpoint over `eval_range`, first warming the state
/// through `warm_range` (no metrics there). The neighbor store starts
/// from the training span the checkpoint's memory was built on.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    dataset: &Dataset,
    model: &mut TgnModel,
    checkpoint: &EpochCheckpoint,
    train_range: Range<usize>,
    warm_range: Range<usize>,
    eval_range: Range<usize>,
    settings: &EvalSettings,
) -> Result<Vec<InteractionVerdict>> {
    model.store.restore_values(&checkpoint.params)?;
    let mut state = TgnState::new(dataset.n_nodes(), model.cfg.memory_dim);
    state.memory = checkpoint.memory.clone();
    state.preload_edges(&dataset.events[train_range.clone()], train_range.start as u32);
    replay_span(model, &mut state, dataset, warm_range, settings.batch_size)?;

    let mut verdicts = Vec::with_capacity(eval_range.len());
    let mut start = eval_range.start;
    while start < eval_range.end {
        let end = (start + settings.batch_size).min(eval_range.end);
        let chunk = &dataset.events[start..end];
        let batch_items = sorted_batch_items(chunk);

        for (k, e) in chunk.iter().enumerate() {
            let event_index = start + k;
            let mut rng = ChaCha8Rng::seed_from_u64(crate::config::derive_seed_indexed(
                settings.seed,
                "eval/cand",
                event_index as u64,
            ));
            let candidates = build_eval_candidates(
                &dataset.ledger,
                e.user,
                e.timestamp,
                e.item,
                &batch_items,
                settings.eval_negatives,
                &mut rng,
            );
            let verdict = match candidates {
                None => InteractionVerdict { event_index, user: e.user, rec: None, inv: None },
                Some(cands) => {
                    let scores = model_scores(model, &state, dataset, e.user, e.timestamp, &cands)?;
                    let by_item: BTreeMap<NodeIndex, f64> =
                        cands.iter().copied().zip(scores.iter().copied()).collect();
                    let ranked = rank_by_scores(
                        &cands,
                        |c| by_item[&c],
                        |c| dataset.registry.name(c).to_string(),
                    );
                    let inv =
                        investment_verdict(dataset, e.user, e.timestamp, &ranked, &settings.sharpe);
                    InteractionVerdict {
                        event_index,
                        user: e.user,
                        rec: Some(rec_verdict(&ranked, e.item)),
                        inv,
                    }
                }
            };
            verdicts.push(verdict);
        }

        state.push_batch(chunk, start as u32)?;
        flush_pending(model, &mut state, &dataset.events)?;
        start = end;
    }
    Ok(verdicts)
}

/// Validation HR@5 and P(SR)@5 of one checkpoint, for model selection.
pub fn checkpoint_selection_metrics(
    dataset: &Dataset,
    model: &mut TgnModel,
    checkpoint: &EpochCheckpoint,
    train_range: Range<usize>,
    val_range: Range<usize>,
    settings: &EvalSettings,
) -> Result<SelectionRow> {
    let verdicts = evaluate_model(
        dataset,
        model,
        checkpoint,
        train_range,
        val_range.start..val_range.start,
        val_range,
        settings,
    )?;
    let report = aggregate("selection", &verdicts, settings.seed, "");
    Ok(SelectionRow {
        epoch: checkpoint.epoch,
        hr5: report.per_interaction.hr5,
        p_sr5: report.per_interaction.p_sr5,
    })
}

// ----------------------------------------------------------------------
// Static baselines
// ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Return,
    Sharpe,
    Popularity,
    Random,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] =
        [BaselineKind::Return, BaselineKind::Sharpe, BaselineKind::Popularity, BaselineKind::Random];

    pub fn label(&self) -> &'static str {
        match self {
            BaselineKind::Return => "baseline-return",
            BaselineKind::Sharpe => "baseline-sharpe",
            BaselineKind::Popularity => "baseline-popularity",
            BaselineKind::Random => "baseline-random",
        }
    }
}

/// One fixed best-first item list serving all test interactions.
/// Price-based kinds score the trailing window ending on the last day
/// of the training period; unscorable items sort last (id ascending).
pub fn baseline_ranking(
    kind: BaselineKind,
    dataset: &Dataset,
    train_range: Range<usize>,
    train_end_day: chrono::NaiveDate,
    cfg: &SharpeConfig,
    seed: u64,
) -> Vec<NodeIndex> {
    let items = dataset.registry.item_indices();
    match kind {
        BaselineKind::Return | BaselineKind::Sharpe => {
            let score = |item: NodeIndex| -> Option<f64> {
                let series = dataset.returns.get(dataset.registry.name(item))?;
                let w = crate::market::trailing_window(series, train_end_day, cfg.window_days).ok()?;
                match kind {
                    BaselineKind::Return => annualized_mean_return(&w, cfg).ok(),
                    _ => sharpe_ratio(&w, cfg).ok(),
                }
            };
            let mut scored: Vec<(NodeIndex, Option<f64>)> =
                items.iter().map(|&i| (i, score(i))).collect();
            scored.sort_by(|a, b| match (a.1, b.1) {
                (Some(x), Some(y)) => y
                    .partial_cmp(&x)
                    .expect("finite scores")
                    .then_with(|| dataset.registry.name(a.0).cmp(dataset.registry.name(b.0))),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => dataset.registry.name(a.0).cmp(dataset.registry.name(b.0)),
            });
            scored.into_iter().map(|(i, _)| i).collect()
        }
        BaselineKind::Popularity => {
            let mut counts: BTreeMap<NodeIndex, usize> = BTreeMap::new();
            for e in &dataset.events[train_range] {
                *counts.entry(e.item).or_default() += 1;
            }
            let mut scored: Vec<(NodeIndex, usize)> =
                items.iter().map(|&i| (i, counts.get(&i).copied().unwrap_or(0))).collect();
            scored.sort_by(|a, b| {
                b.1.cmp(&a.1)
                    .then_with(|| dataset.registry.name(a.0).cmp(dataset.registry.name(b.0)))
            });
            scored.into_iter().map(|(i, _)| i).collect()
        }
        BaselineKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::config::derive_seed_indexed(
                seed,
                "baseline-random",
                0,
            ));
            sample_without_replacement(&items, items.len(), &mut rng)
        }
    }
}

/// Evaluate a static ranking over the same interactions, candidate sets
/// and investment math as the model (identical candidate draws by seed).
pub fn evaluate_baseline(
    dataset: &Dataset,
    label: &str,
    ranking: &[NodeIndex],
    eval_range: Range<usize>,
    settings: &EvalSettings,
) -> Vec<InteractionVerdict> {
    let mut position: BTreeMap<NodeIndex, usize> = BTreeMap::new();
    for (p, &i) in ranking.iter().enumerate() {
        position.insert(i, p);
    }
    let _ = label;

    let mut verdicts = Vec::with_capacity(eval_range.len());
    let mut start = eval_range.start;
    while start < eval_range.end {
        let end = (start + settings.batch_size).min(eval_range.end);
        let chunk = &dataset.events[start..end];
        let batch_items = sorted_batch_items(chunk);

        for (k, e) in chunk.iter().enumerate() {
            let event_index = start + k;
            let mut rng = ChaCha8Rng::seed_from_u64(crate::config::derive_seed_indexed(
                settings.seed,
                "eval/cand",
                event_index as u64,
            ));
            let candidates = build_eval_candidates(
                &dataset.ledger,
                e.user,
                e.timestamp,
                e.item,
                &batch_items,
                settings.eval_negatives,
                &mut rng,
            );
            let verdict = match candidates {
                None => InteractionVerdict { event_index, user: e.user, rec: None, inv: None },
                Some(cands) => {
                    let ranked = rank_by_scores(
                        &cands,
                        |c| -(position.get(&c).copied().unwrap_or(usize::MAX) as f64),
                        |c| dataset.registry.name(c).to_string(),
                    );
                    let inv =
                        investment_verdict(dataset, e.user, e.timestamp, &ranked, &settings.sharpe);
                    InteractionVerdict {
                        event_index,
                        user: e.user,
                        rec: Some(rec_verdict(&ranked, e.item)),
                        inv,
                    }
                }
            };
            verdicts.push(verdict);
        }
        start = end;
    }
    verdicts
}

// ----------------------------------------------------------------------
// Temporal-leakage probe
// ----------------------------------------------------------------------

/// Replay the stream in fixed batches up to the batch containing
/// `probe_idx`, then embed the probe event's endpoints at its own time
/// from pre-batch state. Deleting events after the probe time must not
/// change the result.
pub fn probe_embeddings(
    dataset: &Dataset,
    events: &[InteractionEvent],
    model: &TgnModel,
    probe_idx: usize,
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut state = TgnState::new(dataset.n_nodes(), model.cfg.memory_dim);
    let probe_batch_start = (probe_idx / batch_size) * batch_size;
    let mut start = 0;
    while start < probe_batch_start {
        let end = (start + batch_size).min(probe_batch_start);
        state.push_batch(&events[start..end], start as u32)?;
        flush_pending(model, &mut state, events)?;
        start = end;
    }

    let probe = &events[probe_idx];
    let mut tape = Tape::new();
    let leaves = BatchLeaves::on_tape(&mut tape, model, &model.store)?;
    let ctx =
        EmbedCtx { model, events, neighbors: &state.neighbors, memory: &state.memory };
    let mut view = MemoryView::default();
    let zu = embed_node(&mut tape, &ctx, &leaves, &mut view, probe.user, probe.timestamp)?;
    let zi = embed_node(&mut tape, &ctx, &leaves, &mut view, probe.item, probe.timestamp)?;
    Ok((tape.value(zu).to_vec(), tape.value(zi).to_vec()))
}

// ----------------------------------------------------------------------
// Report rendering
// ----------------------------------------------------------------------

/// Plain-text report: one block per label, every float printed with 12
/// significant digits, config echo at the end.
pub fn render_reports_text(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!("== {} (seed {})\n", r.label, r.seed));
        out.push_str(&format!(
            "interactions total={} rec_evaluated={} rec_excluded={} inv_evaluated={} inv_excluded={}\n",
            r.total_interactions, r.rec_evaluated, r.rec_excluded, r.inv_evaluated, r.inv_excluded
        ));
        for (mode, b) in [("per-interaction", &r.per_interaction), ("per-user", &r.per_user)] {
            out.push_str(&format!(
                "{mode} HR@3={} NDCG@3={} HR@5={} NDCG@5={}\n",
                fmt_sig(b.hr3),
                fmt_sig(b.ndcg3),
                fmt_sig(b.hr5),
                fmt_sig(b.ndcg5)
            ));
            out.push_str(&format!(
                "{mode} dR@3={} P(R)@3={} dSR@3={} P(SR)@3={} dR@5={} P(R)@5={} dSR@5={} P(SR)@5={}\n",
                fmt_sig(b.delta_r3),
                fmt_sig(b.p_r3),
                fmt_sig(b.delta_sr3),
                fmt_sig(b.p_sr3),
                fmt_sig(b.delta_r5),
                fmt_sig(b.p_r5),
                fmt_sig(b.delta_sr5),
                fmt_sig(b.p_sr5)
            ));
        }
        out.push('\n');
    }
    if let Some(first) = reports.first() {
        if !first.config_echo.is_empty() {
            out.push_str("== resolved config\n");
            out.push_str(&first.config_echo);
        }
    }
    out
}

pub fn render_reports_json(reports: &[MetricsReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

/// Per-interaction verdict table as delimited text; excluded metric
/// families leave their columns empty.
pub fn render_verdicts_csv(
    verdicts: &[InteractionVerdict],
    user_name: impl Fn(NodeIndex) -> String,
) -> String {
    let mut out = String::from(
        "event_index,user_id,hit3,hit5,ndcg3,ndcg5,init_return,init_sharpe,\
         delta_r3,delta_sr3,delta_r5,delta_sr5,improved_r3,improved_sr3,improved_r5,improved_sr5\n",
    );
    for v in verdicts {
        let rec = match &v.rec {
            Some(r) => format!(
                "{},{},{},{}",
                r.hit3 as u8,
                r.hit5 as u8,
                fmt_sig(r.ndcg3),
                fmt_sig(r.ndcg5)
            ),
            None => ",,,".to_string(),
        };
        let inv = match &v.inv {
            Some(i) => format!(
                "{},{},{},{},{},{},{},{},{},{}",
                fmt_sig(i.init_return),
                fmt_sig(i.init_sharpe),
                fmt_sig(i.delta_r3),
                fmt_sig(i.delta_sr3),
                fmt_sig(i.delta_r5),
                fmt_sig(i.delta_sr5),
                i.improved_r3 as u8,
                i.improved_sr3 as u8,
                i.improved_r5 as u8,
                i.improved_sr5 as u8
            ),
            None => ",,,,,,,,,".to_string(),
        };
        out.push_str(&format!("{},{},{rec},{inv}\n", v.event_index, user_name(v.user)));
    }
    out
}
