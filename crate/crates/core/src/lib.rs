//! Desk-scale simulator for a recommendation funnel augmented with an
//! offline, asynchronously refreshed candidate store.
//!
//! The crate is organised bottom-up:
//!
//! - [`worldgen`]: the synthetic world (users, items, engagement oracle).
//! - [`scorers`]: the model hierarchy as noisy observers of the oracle.
//! - [`retrieval`]: exact top-K candidate generation per source.
//! - [`store`]: the versioned per-user key-value store.
//! - [`pipeline`]: off-peak refresh scheduling and offline ranking.
//! - [`funnel`]: the online serving path.
//! - [`sim`]: a driver stepping world, pipeline, and tables together.
//! - [`evalkit`]: recall measurement and the experiment runners.
//! - [`config`] and [`cli`]: the run configuration and command entry points.

pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod funnel;
pub mod ids;
pub mod keyed;
pub mod pipeline;
pub mod retrieval;
pub mod scorers;
pub mod sim;
pub mod store;
pub mod worldgen;

pub use error::{Error, Result};
pub use ids::{Hour, ItemId, UserId};
