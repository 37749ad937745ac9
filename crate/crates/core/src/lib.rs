//! Differentially private smart-meter reporting with periodic noise
//! cancellation (DPNCT).
//!
//! Meters mask every reading with a share of a distributed Laplace draw and
//! cancel each share one period later, so individual readings are hidden
//! from the aggregator while billing totals stay accurate. Rotating group
//! masters forward per-group noise sums, letting the aggregator recover the
//! exact total load at every timestep. A trusted-aggregator baseline (DRDP)
//! and a metrics harness support utility/privacy comparisons.

pub mod aggregator;
pub mod baseline_drdp;
pub mod data_io;
pub mod dp_noise;
pub mod energy;
pub mod grouping;
pub mod meter;
pub mod metrics;
pub mod scenario;
pub mod seeding;

pub use energy::MicroKwh;
