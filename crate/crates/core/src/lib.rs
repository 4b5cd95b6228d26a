//! Distributed maximum-differential-backlog (backpressure) control of CDMA
//! multi-hop wireless networks.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below fix the scalar to `f64`, which is what the simulator
//! and the CLI use.

// Negated comparisons are how NaN is rejected throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod mdb;
pub mod model;
pub mod phy;
pub mod power;
pub mod scalar;
pub mod scenario_io;
pub mod sim;
pub mod stability;

pub use error::{Error, Result};
pub use experiment::{run_experiment, verify_trace, ExperimentConfig, ExperimentResult, ScenarioSource, VerifyOptions, VerifyReport};
pub use model::{
    generate_scenario, validate_model, validate_traffic, Arrival, Commodity, GeneratorParams, Link, NetworkModel,
    Scenario, TrafficSpec, Violation,
};
pub use mdb::{QueueState, RateAssignment, SchemeConfig, SchemeKind, SchemeRunner, SlotDecision};
pub use phy::{LinkMetrics, PowerState};
pub use power::{BacklogWeights, Scaling, SolverConfig, StepsizeRule};
pub use scalar::Scalar;

pub type NetworkModel64 = NetworkModel<f64>;
pub type Scenario64 = Scenario<f64>;
pub type PowerState64 = PowerState<f64>;
pub type LinkMetrics64 = LinkMetrics<f64>;
pub type BacklogWeights64 = BacklogWeights<f64>;
pub type SolverConfig64 = SolverConfig<f64>;
