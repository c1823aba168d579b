//! Diversification-enhancing sampling: candidate selection, Sharpe
//! scoring of hypothetical portfolio additions, and contrastive pair
//! extraction.
//!
//! Candidates never overlap the user's current portfolio or the
//! interaction's true item; candidates whose Sharpe cannot be computed
//! (no aligned window, zero volatility) are dropped rather than scored,
//! so no imputed value ever enters the argmax.

use crate::events::{NodeIndex, PortfolioLedger};
use crate::market::{sharpe_ratio, MarketError, ReturnSeries, ReturnTable, SharpeConfig};
use chrono::NaiveDate;
use rand::Rng;
use std::collections::BTreeSet;

/// Uniform sample without replacement: partial Fisher-Yates over a copy
/// of the pool, preserving determinism given the RNG stream.
pub fn sample_without_replacement<T: Clone, R: Rng>(pool: &[T], m: usize, rng: &mut R) -> Vec<T> {
    let mut items = pool.to_vec();
    let take = m.min(items.len());
    for i in 0..take {
        let j = rng.random_range(i..items.len());
        items.swap(i, j);
    }
    items.truncate(take);
    items
}

/// Up to `m_c` items drawn uniformly from the batch's items minus the
/// user's portfolio minus the true item. The batch item list must be
/// sorted (ascending item id) for replayable draws.
pub fn sample_candidates<R: Rng>(
    ledger: &PortfolioLedger,
    user: NodeIndex,
    t: i64,
    batch_items: &[NodeIndex],
    true_item: NodeIndex,
    m_c: usize,
    rng: &mut R,
) -> Vec<NodeIndex> {
    let held = ledger.portfolio_at(user, t);
    let pool: Vec<NodeIndex> = batch_items
        .iter()
        .copied()
        .filter(|&i| i != true_item && !held.contains(&i))
        .collect();
    sample_without_replacement(&pool, m_c, rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredCandidate {
    pub item: NodeIndex,
    /// Sharpe ratio of the user's portfolio with this item added.
    pub sharpe_after: f64,
}

/// Scores hypothetical additions to one fixed portfolio at one time.
/// The held members' trailing windows are computed once and shared
/// across candidates via their running sum.
pub struct PortfolioScorer<'a> {
    returns: &'a ReturnTable,
    cfg: SharpeConfig,
    t: NaiveDate,
    /// Aligned member windows, if the portfolio itself is scorable:
    /// (window dates, elementwise sum of member returns, member count).
    held: Option<(Vec<NaiveDate>, Vec<f64>, usize)>,
    held_ok: bool,
}

impl<'a> PortfolioScorer<'a> {
    pub fn new<I: IntoIterator<Item = &'a str>>(
        returns: &'a ReturnTable,
        cfg: SharpeConfig,
        t: NaiveDate,
        portfolio: I,
    ) -> Self {
        let mut held: Option<(Vec<NaiveDate>, Vec<f64>, usize)> = None;
        let mut held_ok = true;
        for asset in portfolio {
            let window = returns
                .get(asset)
                .ok_or(MarketError::DateMisalignment)
                .and_then(|s| crate::market::trailing_window(s, t, cfg.window_days));
            let Ok(w) = window else {
                held_ok = false;
                break;
            };
            match &mut held {
                None => held = Some((w.dates().to_vec(), w.values().to_vec(), 1)),
                Some((dates, sum, count)) => {
                    if dates.as_slice() != w.dates() {
                        held_ok = false;
                        break;
                    }
                    for (o, v) in sum.iter_mut().zip(w.values()) {
                        *o += v;
                    }
                    *count += 1;
                }
            }
        }
        PortfolioScorer { returns, cfg, t, held: if held_ok { held } else { None }, held_ok }
    }

    /// Sharpe of portfolio ∪ {candidate} over the trailing window, or
    /// the error that makes this candidate unscorable.
    pub fn score(&self, candidate: &str) -> Result<f64, MarketError> {
        if !self.held_ok {
            return Err(MarketError::DateMisalignment);
        }
        let series = self.returns.get(candidate).ok_or(MarketError::DateMisalignment)?;
        let w = crate::market::trailing_window(series, self.t, self.cfg.window_days)?;
        let combined = match &self.held {
            None => ReturnSeries::new(w.dates().to_vec(), w.values().to_vec()),
            Some((dates, sum, count)) => {
                if dates.as_slice() != w.dates() {
                    return Err(MarketError::DateMisalignment);
                }
                let n = (*count + 1) as f64;
                let values = sum.iter().zip(w.values()).map(|(s, v)| (s + v) / n).collect();
                ReturnSeries::new(dates.clone(), values)
            }
        };
        sharpe_ratio(&combined, &self.cfg)
    }

    /// Score a candidate set, silently dropping unscorable entries.
    pub fn score_all<'b>(
        &self,
        candidates: impl IntoIterator<Item = (NodeIndex, &'b str)>,
    ) -> Vec<ScoredCandidate> {
        candidates
            .into_iter()
            .filter_map(|(item, name)| {
                self.score(name).ok().map(|sharpe_after| ScoredCandidate { item, sharpe_after })
            })
            .collect()
    }
}

/// Potential positives and negatives extracted from scored candidates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContrastivePair {
    pub positives: Vec<NodeIndex>,
    pub negatives: Vec<NodeIndex>,
}

impl ContrastivePair {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() || self.negatives.is_empty()
    }
}

/// Sort descending by (score, then item id ascending) and take the top
/// `m_p` as positives, bottom `m_n` as negatives. Short candidate lists
/// shrink both sides proportionally, keeping at least one each when two
/// or more candidates exist; a single candidate yields an empty pair.
pub fn select_pairs(
    scored: &[ScoredCandidate],
    m_p: usize,
    m_n: usize,
    item_name: impl Fn(NodeIndex) -> String,
) -> ContrastivePair {
    let s = scored.len();
    if s <= 1 || m_p == 0 || m_n == 0 {
        return ContrastivePair::default();
    }
    let mut order: Vec<&ScoredCandidate> = scored.iter().collect();
    order.sort_by(|a, b| {
        b.sharpe_after
            .partial_cmp(&a.sharpe_after)
            .expect("finite scores")
            .then_with(|| item_name(a.item).cmp(&item_name(b.item)))
    });

    let (take_p, take_n) = if s >= m_p + m_n {
        (m_p, m_n)
    } else {
        (
            (s * m_p / (m_p + m_n)).max(1),
            (s * m_n / (m_p + m_n)).max(1),
        )
    };
    debug_assert!(take_p + take_n <= s);
    ContrastivePair {
        positives: order[..take_p].iter().map(|c| c.item).collect(),
        negatives: order[s - take_n..].iter().map(|c| c.item).collect(),
    }
}

/// Items a user has interacted with up to and including `t`, the
/// exclusion set for ranking-loss negatives.
pub fn interacted_items(ledger: &PortfolioLedger, user: NodeIndex, t: i64) -> BTreeSet<NodeIndex> {
    // portfolio_at is strict, so shift the bound one tick past t
    ledger.portfolio_at(user, t.saturating_add(1))
}
