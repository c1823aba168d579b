//! Synthetic market and transaction-stream generator.
//!
//! Prices are correlated geometric Brownian paths with a block-diagonal
//! sector structure; transactions come from per-user Poisson processes
//! with Dirichlet sector preferences and a long-tailed item popularity,
//! mixing short-term-trader and long-term-holder archetypes. Identical
//! specs and seeds produce byte-identical output files; every asset and
//! user draws from its own substream keyed by `(seed, unit index)`.

use crate::config::derive_seed_indexed;
use crate::events::EventRow;
use crate::market::PriceSeries;
use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("market spec: {0}")]
    BadMarketSpec(String),
    #[error("behavior spec: {0}")]
    BadBehaviorSpec(String),
    #[error("market cap file row {row}: {msg}")]
    BadCapRow { row: usize, msg: String },
    #[error(transparent)]
    Market(#[from] crate::market::MarketError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ScenarioError>;

/// Market shape: sector count, correlation, annualized drift/volatility
/// ranges and share counts for market caps.
#[derive(Clone, Debug)]
pub struct MarketSpec {
    pub n_assets: usize,
    pub n_sectors: usize,
    pub intra_sector_correlation: f64,
    pub drift_range: (f64, f64),
    pub vol_range: (f64, f64),
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub initial_price: f64,
    pub shares_range: (f64, f64),
    pub seed: u64,
}

impl MarketSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sectors == 0 || self.n_sectors > self.n_assets {
            return Err(ScenarioError::BadMarketSpec(format!(
                "n_sectors must be in 1..=n_assets, got {} of {}",
                self.n_sectors, self.n_assets
            )));
        }
        if !(0.0..1.0).contains(&self.intra_sector_correlation) {
            return Err(ScenarioError::BadMarketSpec(format!(
                "intra-sector correlation must be in [0, 1) for a positive-definite \
                 block structure, got {}",
                self.intra_sector_correlation
            )));
        }
        if self.vol_range.0 < 0.0 || self.vol_range.1 < self.vol_range.0 {
            return Err(ScenarioError::BadMarketSpec("bad volatility range".into()));
        }
        if self.n_days < 2 {
            return Err(ScenarioError::BadMarketSpec("n_days must be at least 2".into()));
        }
        Ok(())
    }
}

/// Transaction-stream shape. `trader_fraction` of users are short-term
/// traders (high event rate, sharper preferences); the rest are
/// long-term holders.
#[derive(Clone, Debug)]
pub struct BehaviorSpec {
    pub n_users: usize,
    pub trader_fraction: f64,
    pub preference_concentration: f64,
    pub popularity_bias_exponent: f64,
    pub n_events: usize,
    pub window_start: NaiveDate,
    pub window_days: u32,
    pub seed: u64,
}

impl BehaviorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.trader_fraction) {
            return Err(ScenarioError::BadBehaviorSpec(format!(
                "trader_fraction must be in [0, 1], got {}",
                self.trader_fraction
            )));
        }
        if self.preference_concentration <= 0.0 {
            return Err(ScenarioError::BadBehaviorSpec(
                "preference_concentration must be positive".into(),
            ));
        }
        if self.n_users == 0 || self.window_days == 0 {
            return Err(ScenarioError::BadBehaviorSpec("n_users and window_days must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the generator knows about one market.
#[derive(Clone, Debug)]
pub struct GeneratedMarket {
    pub prices: BTreeMap<String, PriceSeries>,
    pub shares: BTreeMap<String, f64>,
    pub market_caps: BTreeMap<String, f64>,
    pub sector_of: BTreeMap<String, usize>,
}

pub fn asset_name(i: usize) -> String {
    format!("S{i:03}")
}

pub fn user_name(i: usize) -> String {
    format!("u{i:04}")
}

/// Daily log returns are `mu_i/252 − sigma_i^2/504 + sigma_i/sqrt(252) · z`
/// with `z = sqrt(rho)·g_sector + sqrt(1−rho)·g_own`; prices are the
/// cumulative exponential from a common initial price. The market cap is
/// final price × shares outstanding.
pub fn gen_prices(spec: &MarketSpec) -> Result<GeneratedMarket> {
    spec.validate()?;
    let n_returns = spec.n_days - 1;
    let rho = spec.intra_sector_correlation;
    let (w_sector, w_own) = (rho.sqrt(), (1.0 - rho).sqrt());

    // shared sector factors, one substream per sector
    let mut sector_factors = Vec::with_capacity(spec.n_sectors);
    for s in 0..spec.n_sectors {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(spec.seed, "sector", s as u64));
        let f: Vec<f64> = (0..n_returns).map(|_| StandardNormal.sample(&mut rng)).collect();
        sector_factors.push(f);
    }

    let mut out = GeneratedMarket {
        prices: BTreeMap::new(),
        shares: BTreeMap::new(),
        market_caps: BTreeMap::new(),
        sector_of: BTreeMap::new(),
    };

    for i in 0..spec.n_assets {
        let name = asset_name(i);
        let sector = i % spec.n_sectors;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(spec.seed, "asset", i as u64));
        let mu = rng.random_range(spec.drift_range.0..=spec.drift_range.1);
        let sigma = rng.random_range(spec.vol_range.0..=spec.vol_range.1);
        let shares = rng.random_range(spec.shares_range.0..=spec.shares_range.1);

        let daily_drift = mu / 252.0 - sigma * sigma / (2.0 * 252.0);
        let daily_vol = sigma / (252.0f64).sqrt();

        let mut price = spec.initial_price;
        let mut obs = Vec::with_capacity(spec.n_days);
        obs.push((spec.start_date, price));
        for (t, &factor) in sector_factors[sector].iter().enumerate() {
            let own: f64 = StandardNormal.sample(&mut rng);
            let z = w_sector * factor + w_own * own;
            price *= (daily_drift + daily_vol * z).exp();
            obs.push((spec.start_date + Days::new(t as u64 + 1), price));
        }

        out.market_caps.insert(name.clone(), price * shares);
        out.shares.insert(name.clone(), shares);
        out.sector_of.insert(name.clone(), sector);
        out.prices.insert(name.clone(), PriceSeries::new(&name, obs)?);
    }
    Ok(out)
}

/// One user's sampling profile.
#[derive(Clone, Debug)]
pub struct UserProfile {
    pub user_id: String,
    pub is_trader: bool,
    /// Relative event rate (holders 1, traders 4) before global scaling.
    pub rate_units: f64,
    pub sector_prefs: Vec<f64>,
}

/// Draw archetypes and Dirichlet sector preferences per user. Larger
/// `preference_concentration` sharpens preferences (smaller symmetric
/// Dirichlet parameter); traders get twice the sharpening and four
/// times the event rate of holders.
pub fn gen_user_profiles(spec: &BehaviorSpec, n_sectors: usize) -> Result<Vec<UserProfile>> {
    spec.validate()?;
    let base_alpha = 1.0 / spec.preference_concentration;
    let mut profiles = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(spec.seed, "user", u as u64));
        let is_trader = rng.random_range(0.0..1.0) < spec.trader_fraction;
        let alpha = if is_trader { base_alpha / 2.0 } else { base_alpha };
        let gamma = Gamma::new(alpha, 1.0)
            .map_err(|e| ScenarioError::BadBehaviorSpec(format!("dirichlet: {e}")))?;
        let mut prefs: Vec<f64> = (0..n_sectors).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = prefs.iter().sum();
        if total > 0.0 {
            prefs.iter_mut().for_each(|p| *p /= total);
        } else {
            // all-zero gamma draws are possible for tiny alpha; fall back
            // to a single preferred sector
            let k = rng.random_range(0..n_sectors);
            prefs.iter_mut().for_each(|p| *p = 0.0);
            prefs[k] = 1.0;
        }
        profiles.push(UserProfile {
            user_id: user_name(u),
            is_trader,
            rate_units: if is_trader { 4.0 } else { 1.0 },
            sector_prefs: prefs,
        });
    }
    Ok(profiles)
}

/// Long-tailed base popularity: a seeded permutation of Zipf-like
/// weights `rank^-1.3`.
fn item_popularity(seed: u64, n_assets: usize) -> Vec<f64> {
    let mut ranks: Vec<usize> = (1..=n_assets).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "popularity", 0));
    // Fisher-Yates
    for i in (1..ranks.len()).rev() {
        let j = rng.random_range(0..=i);
        ranks.swap(i, j);
    }
    ranks.into_iter().map(|r| (r as f64).powf(-1.3)).collect()
}

fn weighted_choice<R: Rng>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let mut x = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        x -= w;
        if x < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Emit the event stream for prepared profiles: per-user Poisson event
/// counts with uniform times over the window, item choice with
/// probability ∝ preference(sector) × popularity^bias (squared for
/// traders, concentrating them on fewer items). Rows come out sorted by
/// timestamp.
pub fn gen_events_from_profiles(
    spec: &BehaviorSpec,
    market: &GeneratedMarket,
    profiles: &[UserProfile],
) -> Result<Vec<EventRow>> {
    spec.validate()?;
    if spec.n_events == 0 {
        return Ok(Vec::new());
    }
    let assets: Vec<&String> = market.prices.keys().collect();
    let popularity = item_popularity(spec.seed, assets.len());
    let unit_total: f64 = profiles.iter().map(|p| p.rate_units).sum();
    let events_per_unit = spec.n_events as f64 / unit_total;

    let window_start = crate::events::timestamp_of_day(spec.window_start);
    let window_secs = spec.window_days as i64 * 86_400;

    let mut rows = Vec::with_capacity(spec.n_events + spec.n_events / 4);
    for (u, profile) in profiles.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed_indexed(spec.seed, "user-events", u as u64));
        let lambda = profile.rate_units * events_per_unit;
        let count = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| ScenarioError::BadBehaviorSpec(format!("poisson: {e}")))?
                .sample(&mut rng) as usize
        } else {
            0
        };

        let mut weights: Vec<f64> = assets
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let sector = market.sector_of[*a];
                profile.sector_prefs[sector]
                    * popularity[i].powf(spec.popularity_bias_exponent)
            })
            .collect();
        if profile.is_trader {
            weights.iter_mut().for_each(|w| *w = *w * *w);
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            continue;
        }

        for _ in 0..count {
            let ts = window_start + rng.random_range(0..window_secs);
            let item = weighted_choice(&weights, total, &mut rng);
            rows.push(EventRow {
                timestamp: ts,
                user_id: profile.user_id.clone(),
                item_id: assets[item].clone(),
            });
        }
    }
    rows.sort_by(|a, b| (a.timestamp, &a.user_id).cmp(&(b.timestamp, &b.user_id)));
    Ok(rows)
}

pub fn gen_events(spec: &BehaviorSpec, market: &GeneratedMarket) -> Result<Vec<EventRow>> {
    let profiles = gen_user_profiles(spec, market.sector_of.values().max().map_or(1, |m| m + 1))?;
    gen_events_from_profiles(spec, market, &profiles)
}

// ----------------------------------------------------------------------
// Market-cap sidecar file: CSV `item_id,shares_outstanding,market_cap`.
// ----------------------------------------------------------------------

pub fn write_market_caps<W: Write>(w: W, market: &GeneratedMarket) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["item_id", "shares_outstanding", "market_cap"])
        .map_err(|e| ScenarioError::BadCapRow { row: 1, msg: e.to_string() })?;
    for (item, shares) in &market.shares {
        csv.write_record([
            item.clone(),
            format!("{shares:.2}"),
            format!("{:.2}", market.market_caps[item]),
        ])
        .map_err(|e| ScenarioError::BadCapRow { row: 0, msg: e.to_string() })?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_market_caps<R: Read>(reader: R) -> Result<BTreeMap<String, f64>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = BTreeMap::new();
    for (i, record) in csv.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| ScenarioError::BadCapRow { row, msg: e.to_string() })?;
        let cap: f64 = record[2]
            .parse()
            .map_err(|e| ScenarioError::BadCapRow { row, msg: format!("bad market cap: {e}") })?;
        out.insert(record[0].to_string(), cap);
    }
    Ok(out)
}

pub fn read_market_caps_path(path: &Path) -> Result<BTreeMap<String, f64>> {
    read_market_caps(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::write_prices;

    fn spec(seed: u64) -> MarketSpec {
        MarketSpec {
            n_assets: 12,
            n_sectors: 3,
            intra_sector_correlation: 0.8,
            drift_range: (0.0, 0.2),
            vol_range: (0.1, 0.4),
            n_days: 120,
            start_date: NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(),
            initial_price: 100.0,
            shares_range: (1e5, 1e6),
            seed,
        }
    }

    fn behavior(seed: u64) -> BehaviorSpec {
        BehaviorSpec {
            n_users: 200,
            trader_fraction: 0.5,
            preference_concentration: 8.0,
            popularity_bias_exponent: 1.0,
            n_events: 3000,
            window_start: NaiveDate::from_ymd_opt(2021, 2, 15).unwrap(),
            window_days: 60,
            seed,
        }
    }

    fn sample_correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va * vb).sqrt()
    }

    fn return_matrix(market: &GeneratedMarket) -> Vec<Vec<f64>> {
        market
            .prices
            .values()
            .map(|s| crate::market::log_returns(s).unwrap().values().to_vec())
            .collect()
    }

    #[test]
    fn zero_volatility_means_deterministic_drift_growth() {
        let mut s = spec(1);
        s.vol_range = (0.0, 0.0);
        s.drift_range = (0.12, 0.12);
        let market = gen_prices(&s).unwrap();
        for series in market.prices.values() {
            let r = crate::market::log_returns(series).unwrap();
            for v in r.values() {
                assert!((v - 0.12 / 252.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_sector_correlation_is_near_zero() {
        let mut s = spec(2);
        s.intra_sector_correlation = 0.0;
        s.n_days = 500;
        let market = gen_prices(&s).unwrap();
        let rets = return_matrix(&market);
        let sectors: Vec<usize> = market.sector_of.values().copied().collect();
        let mut acc = 0.0;
        let mut count = 0;
        for i in 0..rets.len() {
            for j in (i + 1)..rets.len() {
                if sectors[i] != sectors[j] {
                    acc += sample_correlation(&rets[i], &rets[j]).abs();
                    count += 1;
                }
            }
        }
        let mean_abs = acc / count as f64;
        assert!(mean_abs < 0.1, "mean |cross-sector corr| = {mean_abs}");
    }

    #[test]
    fn intra_sector_correlation_matches_the_spec_value() {
        let mut s = spec(3);
        s.n_days = 500;
        let market = gen_prices(&s).unwrap();
        let rets = return_matrix(&market);
        let sectors: Vec<usize> = market.sector_of.values().copied().collect();
        let mut acc = 0.0;
        let mut count = 0;
        for i in 0..rets.len() {
            for j in (i + 1)..rets.len() {
                if sectors[i] == sectors[j] {
                    acc += sample_correlation(&rets[i], &rets[j]);
                    count += 1;
                }
            }
        }
        let mean_corr = acc / count as f64;
        assert!((mean_corr - 0.8).abs() < 0.1, "mean intra-sector corr = {mean_corr}");
    }

    #[test]
    fn rejects_perfect_correlation() {
        let mut s = spec(4);
        s.intra_sector_correlation = 1.0;
        assert!(gen_prices(&s).is_err());
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let market1 = gen_prices(&spec(9)).unwrap();
        let market2 = gen_prices(&spec(9)).unwrap();
        let mut buf1 = Vec::new();
        let mut buf2 = Vec::new();
        write_prices(&mut buf1, &market1.prices).unwrap();
        write_prices(&mut buf2, &market2.prices).unwrap();
        assert_eq!(buf1, buf2);

        let rows1 = gen_events(&behavior(5), &market1).unwrap();
        let rows2 = gen_events(&behavior(5), &market2).unwrap();
        assert_eq!(rows1, rows2);

        let mut caps1 = Vec::new();
        let mut caps2 = Vec::new();
        write_market_caps(&mut caps1, &market1).unwrap();
        write_market_caps(&mut caps2, &market2).unwrap();
        assert_eq!(caps1, caps2);
    }

    #[test]
    fn zero_events_requested_gives_empty_stream() {
        let market = gen_prices(&spec(6)).unwrap();
        let mut b = behavior(6);
        b.n_events = 0;
        assert!(gen_events(&b, &market).unwrap().is_empty());
    }

    #[test]
    fn one_hot_preference_stays_in_its_sector() {
        let market = gen_prices(&spec(7)).unwrap();
        let b = behavior(7);
        let profile = UserProfile {
            user_id: "u0000".into(),
            is_trader: false,
            rate_units: 1.0,
            sector_prefs: vec![0.0, 1.0, 0.0],
        };
        let rows = gen_events_from_profiles(&b, &market, &[profile]).unwrap();
        assert!(!rows.is_empty());
        for r in &rows {
            assert_eq!(market.sector_of[&r.item_id], 1);
        }
    }

    #[test]
    fn traders_out_trade_holders_in_the_median() {
        let market = gen_prices(&spec(8)).unwrap();
        let b = behavior(8);
        let profiles = gen_user_profiles(&b, 3).unwrap();
        let rows = gen_events_from_profiles(&b, &market, &profiles).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &rows {
            *counts.entry(r.user_id.as_str()).or_default() += 1;
        }
        let mut trader_counts = Vec::new();
        let mut holder_counts = Vec::new();
        for p in &profiles {
            let c = *counts.get(p.user_id.as_str()).unwrap_or(&0);
            if p.is_trader {
                trader_counts.push(c);
            } else {
                holder_counts.push(c);
            }
        }
        trader_counts.sort_unstable();
        holder_counts.sort_unstable();
        let median = |v: &[usize]| v[v.len() / 2];
        assert!(
            median(&trader_counts) > median(&holder_counts),
            "trader median {} vs holder median {}",
            median(&trader_counts),
            median(&holder_counts)
        );
    }

    #[test]
    fn long_tail_top_decile_takes_most_events() {
        let market = gen_prices(&spec(10)).unwrap();
        let b = behavior(10);
        let rows = gen_events(&b, &market).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &rows {
            *counts.entry(r.item_id.as_str()).or_default() += 1;
        }
        let mut sorted: Vec<usize> = counts.values().copied().collect();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let decile = market.prices.len().div_ceil(10);
        let top: usize = sorted.iter().take(decile).sum();
        let total: usize = sorted.iter().sum();
        assert!(
            top as f64 > 0.5 * total as f64,
            "top decile has {top} of {total} events"
        );
    }

    #[test]
    fn market_cap_file_round_trips() {
        let market = gen_prices(&spec(11)).unwrap();
        let mut buf = Vec::new();
        write_market_caps(&mut buf, &market).unwrap();
        let caps = read_market_caps(buf.as_slice()).unwrap();
        assert_eq!(caps.len(), market.market_caps.len());
        for (item, cap) in &caps {
            assert!((cap - market.market_caps[item]).abs() < 0.01);
        }
    }
}
