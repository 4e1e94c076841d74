//! The round protocol: broadcast, local training, upload, aggregation.

mod config;
mod ledger;
mod node;
mod run;
mod server;
mod wire;

pub use config::{Aggregation, DataConfig, FederationConfig, NodeConfig, Weighting};
pub use ledger::{comm_savings, message_savings, CommLedger, Direction, LedgerEntry, SavingsMode};
pub use node::{
    gather_sequences, local_objective, Alignment, NodeRoundOutput, NodeState, ObjectiveVars, StepRecord, TrainParams,
};
pub use run::{
    evaluate_nodes, retrieval_top1, run_federation, CommReport, EvalSnapshot, ExperimentRecord, Federation,
    NodeRoundMetrics, PairCka, RoundRecord, RoundTraffic,
};
pub use server::{aggregate_fedavg_full, aggregate_geodora, aggregate_geolora, weighted_average, ServerState};
pub use wire::{
    assign_shared, broadcast_bytes, privacy_findings, shared_layout, shared_tensors, update_message_bytes, Broadcast,
    NodeUpdateMessage, PrivacyShapes, BROADCAST_FIXED_BYTES, BROADCAST_MAGIC, UPDATE_FIXED_BYTES, UPDATE_MAGIC,
};
