//! Std side of fedkit: MNIST files, transports, the aggregator and client
//! loops, and the experiment harness behind the `fedkit` binary.

pub mod aggregator;
pub mod client;
pub mod data;
pub mod eval;
pub mod harness;
pub mod metrics;
pub mod transport;
