//! Federated averaging primitives for a fixed dense MNIST classifier.
//!
//! Everything in this crate is pure computation over owned buffers and runs
//! without `std`: tensors and the 784-128-10 network with its training loop,
//! IDX parsing and client sharding, the framed wire format exchanged between
//! clients and the aggregator, FedAvg aggregation with per-round bookkeeping,
//! and seeded churn schedules. IO, transports and the experiment driver live
//! in the `fedkit` crate.
//!
//! All training state is `f32`. Aggregation accumulates in `f64` in ascending
//! client-id order so that a round's result depends only on the set of updates
//! received, never on their arrival order.

#![no_std]

extern crate alloc;

pub mod churn;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fedavg;
pub mod idx;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod wire;

pub use churn::{client_seed, make_churn_schedule, select_clients, ChurnSchedule};
pub use config::TrainConfig;
pub use dataset::{partition_shards, Dataset, Shard};
pub use error::ContractViolation;
pub use fedavg::{fedavg_aggregate, AggregateError, ClientUpdate, Offer, RoundOutcome, RoundState};
pub use nn::{
    backward, cross_entropy_loss, evaluate, forward, init_model, relu, sgd_step, softmax,
    train_epochs, DropoutMask, EvalResult, EvalTally, ForwardCache, Gradients, Mode, ModelArch,
    ModelParams,
};
pub use tensor::Tensor;
pub use wire::{decode, encode, DecodeError, WireMessage};
