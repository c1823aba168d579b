//! Continuous-time bipartite interaction store: event ingestion,
//! temporal neighbor queries, the per-user portfolio ledger, dataset
//! filtering and rolling sub-dataset construction.

use crate::market::{MarketError, PriceSeries, ReturnTable};
use chrono::{DateTime, Days, Months, NaiveDate};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Width of the per-event price-history feature.
pub const EDGE_FEATURE_LEN: usize = 30;

pub type NodeIndex = u32;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("event file row {row}: {msg}")]
    BadRow { row: usize, msg: String },
    #[error("event file row {row}: unknown item {item:?} (no price series)")]
    UnknownItem { row: usize, item: String },
    #[error("item {0:?} has no price history")]
    MissingHistory(String),
    #[error("date range shorter than one period ({period_months} months)")]
    EmptySplit { period_months: u32 },
    #[error("split manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, EventError>;

/// One parsed row of the event file, before feature construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventRow {
    pub timestamp: i64,
    pub user_id: String,
    pub item_id: String,
}

/// One timestamped purchase with its 30-entry price-history feature.
#[derive(Clone, Debug)]
pub struct InteractionEvent {
    pub user: NodeIndex,
    pub item: NodeIndex,
    pub timestamp: i64,
    pub edge_feature: [f64; EDGE_FEATURE_LEN],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    User,
    Item,
}

/// Stable mapping between external string ids and dense node indices.
/// Users and items share one index space; items are registered first
/// (sorted by id), then users in order of first appearance.
#[derive(Clone, Debug, Default)]
pub struct NodeRegistry {
    names: Vec<String>,
    kinds: Vec<NodeKind>,
    users: HashMap<String, NodeIndex>,
    items: HashMap<String, NodeIndex>,
}

impl NodeRegistry {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, node: NodeIndex) -> &str {
        &self.names[node as usize]
    }

    pub fn kind(&self, node: NodeIndex) -> NodeKind {
        self.kinds[node as usize]
    }

    pub fn user(&self, id: &str) -> Option<NodeIndex> {
        self.users.get(id).copied()
    }

    pub fn item(&self, id: &str) -> Option<NodeIndex> {
        self.items.get(id).copied()
    }

    pub fn item_indices(&self) -> Vec<NodeIndex> {
        let mut v: Vec<NodeIndex> = self.items.values().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn user_indices(&self) -> Vec<NodeIndex> {
        let mut v: Vec<NodeIndex> = self.users.values().copied().collect();
        v.sort_unstable();
        v
    }

    fn add_item(&mut self, id: &str) -> NodeIndex {
        *self.items.entry(id.to_string()).or_insert_with(|| {
            self.names.push(id.to_string());
            self.kinds.push(NodeKind::Item);
            (self.names.len() - 1) as NodeIndex
        })
    }

    fn add_user(&mut self, id: &str) -> NodeIndex {
        *self.users.entry(id.to_string()).or_insert_with(|| {
            self.names.push(id.to_string());
            self.kinds.push(NodeKind::User);
            (self.names.len() - 1) as NodeIndex
        })
    }
}

pub fn day_of_timestamp(ts: i64) -> NaiveDate {
    DateTime::from_timestamp(ts, 0).expect("timestamp in range").date_naive()
}

pub fn timestamp_of_day(d: NaiveDate) -> i64 {
    d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp()
}

/// The 30 most recent daily log returns of `item_id` dated at or before
/// the event day, left-padded with zeros when history is shorter.
pub fn compute_edge_feature(
    item_id: &str,
    t: i64,
    returns: &ReturnTable,
) -> Result<[f64; EDGE_FEATURE_LEN]> {
    let series = returns
        .get(item_id)
        .ok_or_else(|| EventError::MissingHistory(item_id.to_string()))?;
    let mut out = [0.0; EDGE_FEATURE_LEN];
    let end = series.dates().partition_point(|&d| d <= day_of_timestamp(t));
    let start = end.saturating_sub(EDGE_FEATURE_LEN);
    let vals = &series.values()[start..end];
    out[EDGE_FEATURE_LEN - vals.len()..].copy_from_slice(vals);
    Ok(out)
}

// ----------------------------------------------------------------------
// Event file format: CSV with header `timestamp,user_id,item_id`,
// timestamps in integer seconds since the epoch.
// ----------------------------------------------------------------------

pub fn read_event_rows<R: Read>(reader: R) -> Result<Vec<EventRow>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut rows = Vec::new();
    for (i, record) in csv.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| EventError::BadRow { row, msg: e.to_string() })?;
        if record.len() != 3 {
            return Err(EventError::BadRow {
                row,
                msg: format!("expected 3 columns, got {}", record.len()),
            });
        }
        let timestamp: i64 = record[0]
            .parse()
            .map_err(|e| EventError::BadRow { row, msg: format!("bad timestamp: {e}") })?;
        rows.push(EventRow {
            timestamp,
            user_id: record[1].to_string(),
            item_id: record[2].to_string(),
        });
    }
    Ok(rows)
}

pub fn read_event_rows_path(path: &Path) -> Result<Vec<EventRow>> {
    read_event_rows(std::fs::File::open(path)?)
}

pub fn write_event_rows<W: Write>(w: W, rows: &[EventRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["timestamp", "user_id", "item_id"])
        .map_err(|e| EventError::BadRow { row: 1, msg: e.to_string() })?;
    for r in rows {
        csv.write_record([r.timestamp.to_string(), r.user_id.clone(), r.item_id.clone()])
            .map_err(|e| EventError::BadRow { row: 0, msg: e.to_string() })?;
    }
    csv.flush()?;
    Ok(())
}

/// Events plus everything derived from them that is read-only after
/// construction.
pub struct Dataset {
    pub events: Vec<InteractionEvent>,
    pub registry: NodeRegistry,
    pub prices: BTreeMap<String, PriceSeries>,
    pub returns: ReturnTable,
    pub ledger: PortfolioLedger,
}

impl Dataset {
    /// Ingest parsed rows against a price table: register nodes, sort by
    /// (timestamp, input order), build edge features. Repeat purchases
    /// are legal and kept.
    pub fn ingest(rows: &[EventRow], prices: BTreeMap<String, PriceSeries>) -> Result<Self> {
        let returns = ReturnTable::from_prices(&prices)?;
        let mut registry = NodeRegistry::default();
        for item_id in prices.keys() {
            registry.add_item(item_id);
        }

        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by_key(|&i| (rows[i].timestamp, i));

        let mut events = Vec::with_capacity(rows.len());
        for &i in &order {
            let r = &rows[i];
            let item = registry.item(&r.item_id).ok_or_else(|| EventError::UnknownItem {
                row: i + 2,
                item: r.item_id.clone(),
            })?;
            let user = registry.add_user(&r.user_id);
            let edge_feature = compute_edge_feature(&r.item_id, r.timestamp, &returns)?;
            events.push(InteractionEvent { user, item, timestamp: r.timestamp, edge_feature });
        }
        let ledger = PortfolioLedger::build(&events);
        Ok(Dataset { events, registry, prices, returns, ledger })
    }

    pub fn n_nodes(&self) -> usize {
        self.registry.len()
    }
}

// ----------------------------------------------------------------------
// Temporal neighbors
// ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeighborEntry {
    pub neighbor: NodeIndex,
    pub timestamp: i64,
    /// Index into the event list that owns the edge feature.
    pub event_idx: u32,
}

/// Per-node, time-ordered interaction lists. Queries at time `t` only
/// ever return entries with `timestamp < t`.
#[derive(Clone, Debug)]
pub struct TemporalNeighborStore {
    per_node: Vec<Vec<NeighborEntry>>,
}

impl TemporalNeighborStore {
    pub fn new(n_nodes: usize) -> Self {
        TemporalNeighborStore { per_node: vec![Vec::new(); n_nodes] }
    }

    /// Append one event's edge to both endpoints. Must be called in
    /// stream order; each node's list stays sorted by timestamp.
    pub fn insert(&mut self, event_idx: u32, event: &InteractionEvent) {
        for (node, other) in [(event.user, event.item), (event.item, event.user)] {
            let list = &mut self.per_node[node as usize];
            debug_assert!(list.last().map(|e| e.timestamp <= event.timestamp).unwrap_or(true));
            list.push(NeighborEntry { neighbor: other, timestamp: event.timestamp, event_idx });
        }
    }

    /// Up to `n` most recent neighbors strictly before `t`, newest
    /// first. Ties on timestamp come out in reverse insertion order.
    pub fn neighbors(&self, node: NodeIndex, t: i64, n: usize) -> Vec<NeighborEntry> {
        let list = &self.per_node[node as usize];
        let cut = list.partition_point(|e| e.timestamp < t);
        list[cut.saturating_sub(n)..cut].iter().rev().copied().collect()
    }

    pub fn n_entries(&self, node: NodeIndex) -> usize {
        self.per_node[node as usize].len()
    }
}

// ----------------------------------------------------------------------
// Portfolio ledger
// ----------------------------------------------------------------------

/// Earliest purchase timestamp per (user, item), built once over the
/// whole stream and filtered by time at query time.
#[derive(Clone, Debug, Default)]
pub struct PortfolioLedger {
    holdings: HashMap<NodeIndex, BTreeMap<NodeIndex, i64>>,
}

impl PortfolioLedger {
    pub fn build(events: &[InteractionEvent]) -> Self {
        let mut holdings: HashMap<NodeIndex, BTreeMap<NodeIndex, i64>> = HashMap::new();
        for e in events {
            holdings
                .entry(e.user)
                .or_default()
                .entry(e.item)
                .and_modify(|t| *t = (*t).min(e.timestamp))
                .or_insert(e.timestamp);
        }
        PortfolioLedger { holdings }
    }

    /// Items whose earliest purchase is strictly before `t`; the
    /// purchase happening at exactly `t` is not yet held.
    pub fn portfolio_at(&self, user: NodeIndex, t: i64) -> BTreeSet<NodeIndex> {
        self.holdings
            .get(&user)
            .map(|m| m.iter().filter(|&(_, &ts)| ts < t).map(|(&i, _)| i).collect())
            .unwrap_or_default()
    }

    /// True if the user has any purchase of `item` at or before `t`.
    pub fn interacted_by(&self, user: NodeIndex, item: NodeIndex, t: i64) -> bool {
        self.holdings
            .get(&user)
            .and_then(|m| m.get(&item))
            .map(|&ts| ts <= t)
            .unwrap_or(false)
    }

    pub fn n_users(&self) -> usize {
        self.holdings.len()
    }
}

// ----------------------------------------------------------------------
// Dataset filtering
// ----------------------------------------------------------------------

/// Outcome of [`filter_dataset`]: surviving rows plus what was removed.
#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub kept: Vec<EventRow>,
    pub removed_items: BTreeSet<String>,
    pub removed_users: BTreeSet<String>,
}

/// Nearest-rank percentile: the ceil(q·n)-th smallest value (q in 0..1).
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// True if the series contains ≥30 consecutive identical prices.
fn has_flat_run(series: &PriceSeries, run_len: usize) -> bool {
    let mut run = 1;
    for w in series.observations().windows(2) {
        if w[0].1 == w[1].1 {
            run += 1;
            if run >= run_len {
                return true;
            }
        } else {
            run = 1;
        }
    }
    false
}

/// Drop events of (a) items below the 5th percentile of market cap,
/// (b) items with a ≥30-day flat price run, (c) users above the 95th
/// percentile of trade count. Percentiles are nearest-rank with strict
/// inequality against the threshold, so ties at the threshold survive.
/// User counts are taken after item removal.
pub fn filter_dataset(
    rows: &[EventRow],
    prices: &BTreeMap<String, PriceSeries>,
    market_caps: &BTreeMap<String, f64>,
) -> FilterOutcome {
    let mut removed_items: BTreeSet<String> = BTreeSet::new();

    if !market_caps.is_empty() {
        let mut caps: Vec<f64> = market_caps.values().copied().collect();
        caps.sort_by(f64::total_cmp);
        let cap_threshold = nearest_rank(&caps, 0.05);
        for (item, &cap) in market_caps {
            if cap < cap_threshold {
                removed_items.insert(item.clone());
            }
        }
    }
    for (item, series) in prices {
        if has_flat_run(series, EDGE_FEATURE_LEN) {
            removed_items.insert(item.clone());
        }
    }

    let after_items: Vec<&EventRow> =
        rows.iter().filter(|r| !removed_items.contains(&r.item_id)).collect();

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &after_items {
        *counts.entry(r.user_id.as_str()).or_default() += 1;
    }
    let mut removed_users: BTreeSet<String> = BTreeSet::new();
    if !counts.is_empty() {
        let mut sorted: Vec<f64> = counts.values().map(|&c| c as f64).collect();
        sorted.sort_by(f64::total_cmp);
        let user_threshold = nearest_rank(&sorted, 0.95);
        for (&user, &count) in &counts {
            if count as f64 > user_threshold {
                removed_users.insert(user.to_string());
            }
        }
    }

    let kept = after_items
        .into_iter()
        .filter(|r| !removed_users.contains(&r.user_id))
        .cloned()
        .collect();
    FilterOutcome { kept, removed_items, removed_users }
}

// ----------------------------------------------------------------------
// Rolling splits
// ----------------------------------------------------------------------

/// One 9-month period split chronologically 7:1:1 by duration. Interval
/// boundaries are midnight-UTC timestamps, half-open `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RollingSplit {
    pub period_index: usize,
    pub start: NaiveDate,
    pub train_end: NaiveDate,
    pub val_end: NaiveDate,
    pub end: NaiveDate,
}

impl RollingSplit {
    pub fn train_interval(&self) -> (i64, i64) {
        (timestamp_of_day(self.start), timestamp_of_day(self.train_end))
    }

    pub fn val_interval(&self) -> (i64, i64) {
        (timestamp_of_day(self.train_end), timestamp_of_day(self.val_end))
    }

    pub fn test_interval(&self) -> (i64, i64) {
        (timestamp_of_day(self.val_end), timestamp_of_day(self.end))
    }
}

/// Maximal list of periods fully inside `[range_start, range_end]`,
/// starting every `stride_months` with length `period_months`. Month
/// arithmetic is calendar addition with day-of-month clamping; the
/// 7:1:1 boundaries are whole-day floors of the period duration.
pub fn make_rolling_splits(
    range_start: NaiveDate,
    range_end: NaiveDate,
    period_months: u32,
    stride_months: u32,
) -> Result<Vec<RollingSplit>> {
    let mut splits = Vec::new();
    let mut k = 0u32;
    loop {
        let start = range_start
            .checked_add_months(Months::new(k * stride_months))
            .ok_or(EventError::EmptySplit { period_months })?;
        let end = start
            .checked_add_months(Months::new(period_months))
            .ok_or(EventError::EmptySplit { period_months })?;
        if end > range_end {
            break;
        }
        let total_days = (end - start).num_days();
        let train_end = start + Days::new((total_days * 7 / 10) as u64);
        let val_end = start + Days::new((total_days * 8 / 10) as u64);
        splits.push(RollingSplit { period_index: splits.len() + 1, start, train_end, val_end, end });
        k += 1;
    }
    if splits.is_empty() {
        return Err(EventError::EmptySplit { period_months });
    }
    Ok(splits)
}

/// Index range of the time-sorted event list falling inside a
/// half-open timestamp interval.
pub fn event_range(events: &[InteractionEvent], interval: (i64, i64)) -> std::ops::Range<usize> {
    let lo = events.partition_point(|e| e.timestamp < interval.0);
    let hi = events.partition_point(|e| e.timestamp < interval.1);
    lo..hi
}

/// Split manifest: CSV of period index plus boundary dates and their
/// midnight-UTC timestamps.
pub fn write_split_manifest<W: Write>(w: W, splits: &[RollingSplit]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "period_index",
        "start",
        "train_end",
        "val_end",
        "end",
        "start_ts",
        "train_end_ts",
        "val_end_ts",
        "end_ts",
    ])
    .map_err(|e| EventError::BadManifest(e.to_string()))?;
    for s in splits {
        csv.write_record([
            s.period_index.to_string(),
            s.start.to_string(),
            s.train_end.to_string(),
            s.val_end.to_string(),
            s.end.to_string(),
            timestamp_of_day(s.start).to_string(),
            timestamp_of_day(s.train_end).to_string(),
            timestamp_of_day(s.val_end).to_string(),
            timestamp_of_day(s.end).to_string(),
        ])
        .map_err(|e| EventError::BadManifest(e.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_split_manifest<R: Read>(reader: R) -> Result<Vec<RollingSplit>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for record in csv.records() {
        let record = record.map_err(|e| EventError::BadManifest(e.to_string()))?;
        let date = |i: usize| -> Result<NaiveDate> {
            NaiveDate::parse_from_str(&record[i], "%Y-%m-%d")
                .map_err(|e| EventError::BadManifest(e.to_string()))
        };
        out.push(RollingSplit {
            period_index: record[0]
                .parse()
                .map_err(|e| EventError::BadManifest(format!("bad period index: {e}")))?,
            start: date(1)?,
            train_end: date(2)?,
            val_end: date(3)?,
            end: date(4)?,
        });
    }
    Ok(out)
}

pub fn write_split_manifest_path(path: &Path, splits: &[RollingSplit]) -> Result<()> {
    write_split_manifest(std::fs::File::create(path)?, splits)
}

pub fn read_split_manifest_path(path: &Path) -> Result<Vec<RollingSplit>> {
    read_split_manifest(std::fs::File::open(path)?)
}
