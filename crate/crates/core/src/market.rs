//! Price series, log returns, equal-weight portfolio math and Sharpe
//! ratios — all investment arithmetic used by sampling and evaluation.
//!
//! Conventions, fixed so that independent oracles agree bit for bit:
//! standard deviations use the sample (n−1) denominator; "past 30 days"
//! means the most recent ≤30 return observations dated at or before the
//! query day; zero-volatility windows are an error for the caller to
//! handle, never ±infinity.

use chrono::NaiveDate;
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("{context}: need at least {needed} observations, got {got}")]
    InsufficientHistory { context: &'static str, needed: usize, got: usize },
    #[error("non-positive price {price} for {asset_id} on {date}")]
    NonPositivePrice { asset_id: String, date: NaiveDate, price: f64 },
    #[error("dates not strictly increasing for {asset_id} at {date}")]
    NonIncreasingDates { asset_id: String, date: NaiveDate },
    #[error("portfolio member series have misaligned dates")]
    DateMisalignment,
    #[error("portfolio has no assets")]
    EmptyPortfolio,
    #[error("zero standard deviation over the window")]
    DegenerateVolatility,
    #[error("invalid sharpe config: {0}")]
    BadConfig(String),
    #[error("price file row {row}: {msg}")]
    BadRow { row: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, MarketError>;

/// Daily closing prices of one asset, strictly increasing dates, all
/// prices positive.
#[derive(Clone, Debug)]
pub struct PriceSeries {
    asset_id: String,
    observations: Vec<(NaiveDate, f64)>,
}

impl PriceSeries {
    pub fn new(asset_id: &str, observations: Vec<(NaiveDate, f64)>) -> Result<Self> {
        for w in observations.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(MarketError::NonIncreasingDates {
                    asset_id: asset_id.to_string(),
                    date: w[1].0,
                });
            }
        }
        for &(date, price) in &observations {
            if !price.is_finite() || price <= 0.0 {
                return Err(MarketError::NonPositivePrice {
                    asset_id: asset_id.to_string(),
                    date,
                    price,
                });
            }
        }
        Ok(PriceSeries { asset_id: asset_id.to_string(), observations })
    }

    pub fn asset_id(&self) -> &str {
        &self.asset_id
    }

    pub fn observations(&self) -> &[(NaiveDate, f64)] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn last(&self) -> Option<(NaiveDate, f64)> {
        self.observations.last().copied()
    }
}

/// Daily log returns; `dates[i]` is the day of `values[i]`, i.e. the
/// later day of the price pair that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnSeries {
    dates: Vec<NaiveDate>,
    values: Vec<f64>,
}

impl ReturnSeries {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Self {
        debug_assert_eq!(dates.len(), values.len());
        ReturnSeries { dates, values }
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// All members carry implicit weight 1/n.
#[derive(Clone, Debug)]
pub struct EqualWeightPortfolio {
    assets: BTreeSet<String>,
}

impl EqualWeightPortfolio {
    pub fn new<I: IntoIterator<Item = String>>(assets: I) -> Result<Self> {
        let assets: BTreeSet<String> = assets.into_iter().collect();
        if assets.is_empty() {
            return Err(MarketError::EmptyPortfolio);
        }
        Ok(EqualWeightPortfolio { assets })
    }

    pub fn assets(&self) -> impl Iterator<Item = &str> {
        self.assets.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }

    pub fn contains(&self, asset_id: &str) -> bool {
        self.assets.contains(asset_id)
    }
}

/// Window and annualization settings for Sharpe math. The risk-free
/// rate is a daily rate.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SharpeConfig {
    pub window_days: usize,
    pub risk_free_rate: f64,
    pub annualization_factor: u32,
}

impl Default for SharpeConfig {
    fn default() -> Self {
        SharpeConfig { window_days: 30, risk_free_rate: 0.0, annualization_factor: 252 }
    }
}

impl SharpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_days < 2 {
            return Err(MarketError::BadConfig(format!(
                "window_days must be >= 2, got {}",
                self.window_days
            )));
        }
        if self.annualization_factor == 0 {
            return Err(MarketError::BadConfig("annualization_factor must be positive".into()));
        }
        Ok(())
    }
}

/// `values[t] = ln(price[t+1] / price[t])`, dated at the later day.
pub fn log_returns(prices: &PriceSeries) -> Result<ReturnSeries> {
    if prices.len() < 2 {
        return Err(MarketError::InsufficientHistory {
            context: "log_returns",
            needed: 2,
            got: prices.len(),
        });
    }
    let obs = prices.observations();
    let mut dates = Vec::with_capacity(obs.len() - 1);
    let mut values = Vec::with_capacity(obs.len() - 1);
    for w in obs.windows(2) {
        dates.push(w[1].0);
        values.push((w[1].1 / w[0].1).ln());
    }
    Ok(ReturnSeries { dates, values })
}

/// The up-to-`window_days` most recent return observations dated at or
/// before `t`, in chronological order.
pub fn trailing_window(
    returns: &ReturnSeries,
    t: NaiveDate,
    window_days: usize,
) -> Result<ReturnSeries> {
    let end = returns.dates.partition_point(|&d| d <= t);
    let start = end.saturating_sub(window_days);
    let n = end - start;
    if n < 2 {
        return Err(MarketError::InsufficientHistory {
            context: "trailing_window",
            needed: 2,
            got: n,
        });
    }
    Ok(ReturnSeries {
        dates: returns.dates[start..end].to_vec(),
        values: returns.values[start..end].to_vec(),
    })
}

/// Elementwise arithmetic mean of member return series; all members
/// must share identical dates.
pub fn portfolio_return_series(
    per_asset: &BTreeMap<String, ReturnSeries>,
    portfolio: &EqualWeightPortfolio,
) -> Result<ReturnSeries> {
    let members: Vec<&ReturnSeries> = portfolio
        .assets()
        .map(|a| per_asset.get(a).ok_or(MarketError::DateMisalignment))
        .collect::<Result<_>>()?;
    let first = members.first().ok_or(MarketError::EmptyPortfolio)?;
    for m in &members[1..] {
        if m.dates != first.dates {
            return Err(MarketError::DateMisalignment);
        }
    }
    let n = members.len() as f64;
    let mut values = vec![0.0; first.len()];
    for m in &members {
        for (o, v) in values.iter_mut().zip(m.values()) {
            *o += v;
        }
    }
    for o in &mut values {
        *o /= n;
    }
    Ok(ReturnSeries { dates: first.dates.clone(), values })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample (n−1) standard deviation.
fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// `(mean − rf) / sample_std × sqrt(annualization_factor)`.
pub fn sharpe_ratio(returns: &ReturnSeries, cfg: &SharpeConfig) -> Result<f64> {
    cfg.validate()?;
    if returns.len() < 2 {
        return Err(MarketError::InsufficientHistory {
            context: "sharpe_ratio",
            needed: 2,
            got: returns.len(),
        });
    }
    let std = sample_std(returns.values());
    if std == 0.0 {
        return Err(MarketError::DegenerateVolatility);
    }
    let excess = mean(returns.values()) - cfg.risk_free_rate;
    Ok(excess / std * (cfg.annualization_factor as f64).sqrt())
}

/// `mean × annualization_factor`.
pub fn annualized_mean_return(returns: &ReturnSeries, cfg: &SharpeConfig) -> Result<f64> {
    cfg.validate()?;
    if returns.is_empty() {
        return Err(MarketError::InsufficientHistory {
            context: "annualized_mean_return",
            needed: 1,
            got: 0,
        });
    }
    Ok(mean(returns.values()) * cfg.annualization_factor as f64)
}

// ----------------------------------------------------------------------
// Price file format: CSV with header `date,asset_id,price`, one row per
// asset-day, dates in ISO-8601.
// ----------------------------------------------------------------------

pub fn read_prices<R: Read>(reader: R) -> Result<BTreeMap<String, PriceSeries>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut rows: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for (i, record) in csv.records().enumerate() {
        let row = i + 2; // header is row 1
        let record = record.map_err(|e| MarketError::BadRow { row, msg: e.to_string() })?;
        if record.len() != 3 {
            return Err(MarketError::BadRow {
                row,
                msg: format!("expected 3 columns, got {}", record.len()),
            });
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| MarketError::BadRow { row, msg: format!("bad date: {e}") })?;
        let asset = record[1].to_string();
        let price: f64 = record[2]
            .parse()
            .map_err(|e| MarketError::BadRow { row, msg: format!("bad price: {e}") })?;
        rows.entry(asset).or_default().push((date, price));
    }
    let mut out = BTreeMap::new();
    for (asset, mut obs) in rows {
        obs.sort_by_key(|&(d, _)| d);
        out.insert(asset.clone(), PriceSeries::new(&asset, obs)?);
    }
    Ok(out)
}

pub fn read_prices_path(path: &Path) -> Result<BTreeMap<String, PriceSeries>> {
    read_prices(std::fs::File::open(path)?)
}

pub fn write_prices<W: Write>(w: W, prices: &BTreeMap<String, PriceSeries>) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["date", "asset_id", "price"])
        .map_err(|e| MarketError::BadRow { row: 1, msg: e.to_string() })?;
    for series in prices.values() {
        for &(date, price) in series.observations() {
            csv.write_record([date.to_string(), series.asset_id().to_string(), format!("{price:.6}")])
                .map_err(|e| MarketError::BadRow { row: 0, msg: e.to_string() })?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Precomputed per-asset daily log returns, the shared input of the
/// sampler and the evaluator.
#[derive(Clone, Debug, Default)]
pub struct ReturnTable {
    per_asset: BTreeMap<String, ReturnSeries>,
}

impl ReturnTable {
    pub fn from_prices(prices: &BTreeMap<String, PriceSeries>) -> Result<Self> {
        let mut per_asset = BTreeMap::new();
        for (asset, series) in prices {
            per_asset.insert(asset.clone(), log_returns(series)?);
        }
        Ok(ReturnTable { per_asset })
    }

    pub fn get(&self, asset_id: &str) -> Option<&ReturnSeries> {
        self.per_asset.get(asset_id)
    }

    pub fn assets(&self) -> impl Iterator<Item = &str> {
        self.per_asset.keys().map(String::as_str)
    }

    /// Aligned trailing windows for every portfolio member, averaged
    /// into the portfolio's return window at day `t`.
    pub fn portfolio_window(
        &self,
        portfolio: &EqualWeightPortfolio,
        t: NaiveDate,
        window_days: usize,
    ) -> Result<ReturnSeries> {
        let mut windows = BTreeMap::new();
        for asset in portfolio.assets() {
            let series = self.get(asset).ok_or(MarketError::DateMisalignment)?;
            windows.insert(asset.to_string(), trailing_window(series, t, window_days)?);
        }
        portfolio_return_series(&windows, portfolio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn series(prices: &[f64]) -> PriceSeries {
        let start = day("2021-01-01");
        let obs = prices
            .iter()
            .enumerate()
            .map(|(i, &p)| (start + chrono::Days::new(i as u64), p))
            .collect();
        PriceSeries::new("A", obs).unwrap()
    }

    fn returns_of(values: &[f64]) -> ReturnSeries {
        let start = day("2021-01-02");
        let dates = (0..values.len()).map(|i| start + chrono::Days::new(i as u64)).collect();
        ReturnSeries::new(dates, values.to_vec())
    }

    #[test]
    fn constant_prices_give_zero_returns() {
        let r = log_returns(&series(&[100.0, 100.0, 100.0])).unwrap();
        assert_eq!(r.values(), &[0.0, 0.0]);
    }

    #[test]
    fn single_step_return_is_log_ratio() {
        let r = log_returns(&series(&[100.0, 110.0])).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r.values()[0] - (110.0f64 / 100.0).ln()).abs() < 1e-15);
        assert!((r.values()[0] - 0.0953102).abs() < 1e-7);
    }

    #[test]
    fn halving_and_doubling_are_symmetric() {
        let r = log_returns(&series(&[100.0, 50.0, 100.0])).unwrap();
        let ln2 = 2.0f64.ln();
        assert!((r.values()[0] + ln2).abs() < 1e-15);
        assert!((r.values()[1] - ln2).abs() < 1e-15);
    }

    #[test]
    fn too_short_history_is_an_error() {
        assert!(matches!(
            log_returns(&series(&[100.0])),
            Err(MarketError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn non_positive_price_is_rejected_at_construction() {
        let res = PriceSeries::new("A", vec![(day("2021-01-01"), 100.0), (day("2021-01-02"), 0.0)]);
        assert!(matches!(res, Err(MarketError::NonPositivePrice { .. })));
    }

    #[test]
    fn trailing_window_takes_the_most_recent_slice() {
        let prices: Vec<f64> = (0..61).map(|i| 100.0 + i as f64).collect();
        let r = log_returns(&series(&prices)).unwrap();
        assert_eq!(r.len(), 60);
        let t = *r.dates().last().unwrap();
        let w = trailing_window(&r, t, 30).unwrap();
        assert_eq!(w.len(), 30);
        assert_eq!(w.values(), &r.values()[30..]);
    }

    #[test]
    fn window_before_first_return_is_an_error() {
        let r = log_returns(&series(&[100.0, 101.0, 102.0])).unwrap();
        let before = day("2020-12-01");
        assert!(matches!(
            trailing_window(&r, before, 30),
            Err(MarketError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn window_larger_than_history_returns_everything() {
        let prices: Vec<f64> = (0..11).map(|i| 100.0 * 1.01f64.powi(i)).collect();
        let r = log_returns(&series(&prices)).unwrap();
        let t = *r.dates().last().unwrap();
        let w = trailing_window(&r, t, 30).unwrap();
        assert_eq!(w.len(), 10);
    }

    #[test]
    fn single_asset_portfolio_is_the_asset_itself() {
        let r = returns_of(&[0.01, -0.02, 0.03]);
        let mut map = BTreeMap::new();
        map.insert("A".to_string(), r.clone());
        let pf = EqualWeightPortfolio::new(["A".to_string()]).unwrap();
        let p = portfolio_return_series(&map, &pf).unwrap();
        assert_eq!(p, r);
    }

    #[test]
    fn opposite_members_cancel() {
        let mut map = BTreeMap::new();
        map.insert("A".to_string(), returns_of(&[0.01, -0.02]));
        map.insert("B".to_string(), returns_of(&[-0.01, 0.02]));
        let pf = EqualWeightPortfolio::new(["A".to_string(), "B".to_string()]).unwrap();
        let p = portfolio_return_series(&map, &pf).unwrap();
        assert_eq!(p.values(), &[0.0, 0.0]);
    }

    #[test]
    fn three_member_mean_is_direct() {
        let mut map = BTreeMap::new();
        map.insert("A".to_string(), returns_of(&[0.01]));
        map.insert("B".to_string(), returns_of(&[0.02]));
        map.insert("C".to_string(), returns_of(&[0.03]));
        let pf =
            EqualWeightPortfolio::new(["A".to_string(), "B".to_string(), "C".to_string()]).unwrap();
        let p = portfolio_return_series(&map, &pf).unwrap();
        assert!((p.values()[0] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn misaligned_dates_are_an_error() {
        let mut map = BTreeMap::new();
        map.insert("A".to_string(), returns_of(&[0.01, 0.02]));
        let other = ReturnSeries::new(vec![day("2021-03-01"), day("2021-03-02")], vec![0.0, 0.0]);
        map.insert("B".to_string(), other);
        let pf = EqualWeightPortfolio::new(["A".to_string(), "B".to_string()]).unwrap();
        assert!(matches!(
            portfolio_return_series(&map, &pf),
            Err(MarketError::DateMisalignment)
        ));
    }

    #[test]
    fn zero_mean_returns_give_zero_sharpe() {
        let sr = sharpe_ratio(&returns_of(&[0.01, -0.01]), &SharpeConfig::default()).unwrap();
        assert_eq!(sr, 0.0);
    }

    #[test]
    fn constant_returns_are_degenerate() {
        let res = sharpe_ratio(&returns_of(&[0.01, 0.01, 0.01]), &SharpeConfig::default());
        assert!(matches!(res, Err(MarketError::DegenerateVolatility)));
    }

    #[test]
    fn sharpe_matches_direct_formula_oracle() {
        // Independent one-line evaluation: mean/sample-std × sqrt(252).
        let values = [0.02, 0.00, 0.01];
        let m: f64 = values.iter().sum::<f64>() / 3.0;
        let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        let oracle = m / (ss / 2.0).sqrt() * 252f64.sqrt();

        let sr = sharpe_ratio(&returns_of(&values), &SharpeConfig::default()).unwrap();
        assert!((sr - oracle).abs() <= 1e-12 * oracle.abs());
        assert!((sr - 15.874507866387544).abs() < 1e-12);
    }

    #[test]
    fn annualized_mean_cases() {
        let cfg = SharpeConfig::default();
        assert_eq!(annualized_mean_return(&returns_of(&[0.0, 0.0]), &cfg).unwrap(), 0.0);
        let single = annualized_mean_return(&returns_of(&[0.001]), &cfg).unwrap();
        assert!((single - 0.252).abs() < 1e-15);
        let sym = annualized_mean_return(&returns_of(&[0.004, -0.004]), &cfg).unwrap();
        assert_eq!(sym, 0.0);
    }

    #[test]
    fn diversification_strictly_improves_sharpe_for_imperfect_correlation() {
        // Two series with equal mean and variance but correlation < 1.
        let a = returns_of(&[0.02, 0.00, 0.02, 0.00]);
        let b = returns_of(&[0.00, 0.02, 0.02, 0.00]);
        let cfg = SharpeConfig::default();
        let sr_a = sharpe_ratio(&a, &cfg).unwrap();
        let sr_b = sharpe_ratio(&b, &cfg).unwrap();
        assert_eq!(sr_a, sr_b);

        let mut map = BTreeMap::new();
        map.insert("A".to_string(), a);
        map.insert("B".to_string(), b);
        let pf = EqualWeightPortfolio::new(["A".to_string(), "B".to_string()]).unwrap();
        let combined = portfolio_return_series(&map, &pf).unwrap();
        let sr_p = sharpe_ratio(&combined, &cfg).unwrap();
        assert!(
            sr_p > sr_a,
            "portfolio sharpe {sr_p} should exceed member sharpe {sr_a}"
        );
        assert!(sample_std(combined.values()) < sample_std(map["A"].values()));
    }

    #[test]
    fn price_file_round_trip() {
        let mut prices = BTreeMap::new();
        prices.insert("A".to_string(), series(&[100.0, 101.5, 99.875]));
        let mut buf = Vec::new();
        write_prices(&mut buf, &prices).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("date,asset_id,price\n"));
        let back = read_prices(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back["A"].len(), 3);
        assert_eq!(back["A"].observations()[1].1, 101.5);
    }

    #[test]
    fn malformed_price_rows_carry_row_numbers() {
        let text = "date,asset_id,price\n2021-01-01,A,100.0\nnot-a-date,A,1.0\n";
        match read_prices(text.as_bytes()) {
            Err(MarketError::BadRow { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected BadRow, got {other:?}"),
        }
    }
}
