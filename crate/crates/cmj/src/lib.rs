//! Simulator and statistical verification harness for supercritical general
//! (Crump-Mode-Jagers) branching processes.
//!
//! The crate grows event-driven branching trees, tracks the discounted
//! frontier martingale and its companions on a fixed time grid, derives the
//! analytic model constants (growth exponent, increment variance, limit
//! variance, extinction probability), and runs statistical suites that test
//! the distributional limit behavior of the martingale fluctuations against
//! those constants.

pub mod engine;
pub mod malthusian;
pub mod reproduction;
pub mod rng;
pub mod stats;
