//! Data-parallel split → tube-op → merge stream engine with incremental
//! sliding-window anomaly detection.
//!
//! Events are routed by sensor to tube-ops. Each tube-op shapes the event,
//! updates a per-sensor model (window, 1D K-means, Markov transition matrix)
//! and scores the newest transition sequence against that model. A merger
//! restores a single timestamp-ordered output stream.

pub mod cli;
pub mod detector;
pub mod events;
pub mod kmeans;
pub mod markov;
pub mod order_stats;
pub mod pipeline;
pub mod window;
