//! Portfolio-aware temporal graph stock recommender.
//!
//! The crate is organized along the pipeline: synthetic market and
//! transaction generation ([`scenario`]), price/return math ([`market`]),
//! the interaction store with splits ([`events`]), the temporal graph
//! encoder ([`encoder`]), Sharpe-driven contrastive pair sampling
//! ([`sampler`]), the joint training loop ([`trainer`]) and the
//! recommendation/investment evaluation protocol ([`eval`]). [`config`]
//! holds the flat run configuration and seed derivation.

pub mod config;
pub mod encoder;
pub mod eval;
pub mod events;
pub mod market;
pub mod pipeline;
pub mod sampler;
pub mod scenario;
pub mod trainer;
