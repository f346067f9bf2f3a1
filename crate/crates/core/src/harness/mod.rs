// SPDX-License-Identifier: Apache-2.0

//! Experiment harness: topology and traffic generation, attack scenarios, runs and metrics.

pub mod metrics;
pub mod scenario;
pub mod simulation;
pub mod topogen;
pub mod traffic;

pub use metrics::{emit_metrics, read_metrics, AttackRecord, ExperimentMetrics, FprPoint, Phase, RestoreRecord};
pub use scenario::{implant, BehaviorSpec, GroundTruth, ScenarioId, ScenarioSpec, TargetSpec};
pub use simulation::{
    campaign_specs, run_campaign, run_experiment, ExperimentOutcome, GwardarConfig, LearningConfig, ReplicaCheck,
    RunConfig, Simulation, SimulationState, SnapshotConfig, WarmupReport,
};
pub use topogen::{generate_topology, TopologyKind};
pub use traffic::{generate_traffic, TrafficConfig, TrafficGen, TrafficPacket};
