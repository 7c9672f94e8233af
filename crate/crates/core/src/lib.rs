//! Identification and estimation of finite mixtures of value distributions
//! from pairs of consecutive order statistics observed across auctions.

pub mod auction;
pub mod competition;
pub mod discretize;
pub mod error;
pub mod numeric;
pub mod order_stats;
pub mod pipeline;
pub mod rank;
pub mod sieve;
pub mod simulate;
pub mod source;
pub mod spectral;

pub use error::{Error, Result, Stage};
