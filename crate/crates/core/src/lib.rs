//! Deterministic simulator of federated learning over a time-slotted
//! push-pull uplink.
//!
//! Every stochastic step draws from a ChaCha8 substream derived from the run
//! seed and a fixed tag path (see [`rng`]), so a run is reproducible from
//! `(config, seed)` alone and independent of thread scheduling.

pub mod compute;
pub mod data;
pub mod error;
pub mod learn;
pub mod mac;
pub mod orchestrator;
pub mod rng;
pub mod valuation;

pub use compute::{ComputeProfile, LatencyBoundInputs};
pub use data::{ClientId, ClientProfile, LabeledDataset, PartitionSpec};
pub use error::{Error, Result};
pub use learn::{Arch, EvalReport, ModelParams, TrainConfig};
pub use mac::{FrameConfig, PushOutcome, UeKind};
pub use orchestrator::{
    run_round, run_training, time_to_accuracy, CollisionPolicy, EnvSpec, Environment, LatePull,
    Policy, PolicyKind, RoundRecord, RunTrace, SimConfig, SimState, ValueSet,
};
pub use valuation::{CoalitionGame, GtgConfig, ShapleyEstimate, TabularGame, UtilityContext};
