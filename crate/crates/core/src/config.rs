//! Flat run configuration, deterministic seed fan-out and the fixed
//! numeric output format shared by every report.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("config parse: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Every tunable of the pipeline in one flat document. Unknown keys are
/// rejected when loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; all random streams derive from it by purpose label.
    pub seed: u64,
    /// Output directory for generated files, checkpoints and reports.
    pub out_dir: String,

    // market generation
    pub n_assets: usize,
    pub n_sectors: usize,
    pub intra_sector_correlation: f64,
    pub drift_min: f64,
    pub drift_max: f64,
    pub vol_min: f64,
    pub vol_max: f64,
    pub n_days: usize,
    pub start_date: String,
    pub initial_price: f64,
    pub shares_min: f64,
    pub shares_max: f64,

    // transaction generation
    pub n_users: usize,
    pub trader_fraction: f64,
    pub preference_concentration: f64,
    pub popularity_bias_exponent: f64,
    pub n_events: usize,
    /// Days of price history guaranteed before the first event.
    pub event_warmup_days: u32,
    /// Length of the event window in days, starting after the warmup.
    pub event_span_days: u32,

    // model
    pub memory_dim: usize,
    pub time_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_neighbors: usize,

    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub bpr_negatives: usize,
    pub alpha: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub candidate_set_size: usize,
    pub n_potential_positives: usize,
    pub n_contrastive_negatives: usize,

    // investment math
    pub window_days: usize,
    pub risk_free_rate: f64,
    pub annualization_factor: u32,

    // evaluation
    pub eval_negatives: usize,

    // splits
    pub period_months: u32,
    pub stride_months: u32,
    /// Which period (1-based) train/eval operate on.
    pub period: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            out_dir: "out".into(),

            n_assets: 60,
            n_sectors: 6,
            intra_sector_correlation: 0.8,
            drift_min: -0.35,
            drift_max: 0.65,
            vol_min: 0.12,
            vol_max: 0.35,
            n_days: 330,
            start_date: "2021-01-04".into(),
            initial_price: 100.0,
            shares_min: 1e5,
            shares_max: 5e6,

            n_users: 300,
            trader_fraction: 0.3,
            preference_concentration: 8.0,
            popularity_bias_exponent: 1.0,
            n_events: 10_000,
            event_warmup_days: 40,
            event_span_days: 280,

            memory_dim: 32,
            time_dim: 8,
            n_heads: 2,
            n_layers: 1,
            n_neighbors: 10,

            epochs: 20,
            batch_size: 200,
            bpr_negatives: 3,
            alpha: 0.5,
            tau: 0.1,
            learning_rate: 1e-3,
            candidate_set_size: 10,
            n_potential_positives: 3,
            n_contrastive_negatives: 3,

            window_days: 30,
            risk_free_rate: 0.0,
            annualization_factor: 252,

            eval_negatives: 100,

            period_months: 9,
            stride_months: 3,
            period: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.n_sectors == 0 || self.n_sectors > self.n_assets {
            return fail(format!(
                "n_sectors must be in 1..=n_assets ({}), got {}",
                self.n_assets, self.n_sectors
            ));
        }
        if !(0.0..1.0).contains(&self.intra_sector_correlation) {
            return fail(format!(
                "intra_sector_correlation must be in [0, 1), got {}",
                self.intra_sector_correlation
            ));
        }
        if self.vol_min < 0.0 || self.vol_max < self.vol_min {
            return fail("volatility range must satisfy 0 <= vol_min <= vol_max".into());
        }
        if !(0.0..=1.0).contains(&self.trader_fraction) {
            return fail(format!("trader_fraction must be in [0, 1], got {}", self.trader_fraction));
        }
        if self.preference_concentration <= 0.0 {
            return fail("preference_concentration must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if self.tau <= 0.0 {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.bpr_negatives == 0 {
            return fail("bpr_negatives must be at least 1".into());
        }
        if self.window_days < 2 {
            return fail(format!("window_days must be >= 2, got {}", self.window_days));
        }
        if !self.memory_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "memory_dim ({}) must be divisible by n_heads ({})",
                self.memory_dim, self.n_heads
            ));
        }
        if self.batch_size == 0 || self.n_layers == 0 {
            return fail("batch_size and n_layers must be positive".into());
        }
        if self.period == 0 {
            return fail("period is 1-based and must be positive".into());
        }
        if chrono::NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d").is_err() {
            return fail(format!("start_date must be ISO-8601, got {:?}", self.start_date));
        }
        Ok(())
    }

    pub fn start_date(&self) -> chrono::NaiveDate {
        chrono::NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .expect("validated start_date")
    }

    pub fn sharpe(&self) -> crate::market::SharpeConfig {
        crate::market::SharpeConfig {
            window_days: self.window_days,
            risk_free_rate: self.risk_free_rate,
            annualization_factor: self.annualization_factor,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The exact document echoed into every report.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

// ----------------------------------------------------------------------
// Seed fan-out
// ----------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream seed for one purpose label. The label bytes are
/// folded through splitmix64 so unrelated labels give unrelated streams.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut state = splitmix64(master);
    for &b in label.as_bytes() {
        state = splitmix64(state ^ b as u64);
    }
    state
}

/// Per-unit substream: `(seed, purpose, unit index)`.
pub fn derive_seed_indexed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, label) ^ index)
}

// ----------------------------------------------------------------------
// Numeric output format
// ----------------------------------------------------------------------

/// Fixed 12-significant-digit scientific form used for every float in
/// printed reports, so reports diff cleanly across runs and platforms.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        // avoid the -0 vs 0 distinction in printed output
        return "0.00000000000e0".to_string();
    }
    format!("{x:.11e}")
}
