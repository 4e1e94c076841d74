//! Byte accounting for every message and the analytic savings formulas.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::TransformerConfig;

use super::config::Aggregation;
use super::wire::update_message_bytes;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub node: usize,
    pub direction: Direction,
    pub bytes: u64,
}

/// Every message the federation sent, with running totals.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CommLedger {
    pub entries: Vec<LedgerEntry>,
    pub total_uplink: u64,
    pub total_downlink: u64,
    /// Size of one hypothetical dense-update upload for the same model.
    pub full_model_bytes: u64,
}

impl CommLedger {
    pub fn new(full_model_bytes: u64) -> Self {
        Self {
            full_model_bytes,
            ..Self::default()
        }
    }

    pub fn record(&mut self, round: usize, node: usize, direction: Direction, bytes: u64) {
        self.entries.push(LedgerEntry {
            round,
            node,
            direction,
            bytes,
        });
        match direction {
            Direction::Uplink => self.total_uplink += bytes,
            Direction::Downlink => self.total_downlink += bytes,
        }
    }

    pub fn bytes(&self, round: usize, node: usize, direction: Direction) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.round == round && e.node == node && e.direction == direction)
            .map(|e| e.bytes)
            .sum()
    }

    pub fn uplink_messages(&self) -> usize {
        self.entries.iter().filter(|e| e.direction == Direction::Uplink).count()
    }

    /// What the same uploads would have cost as dense full-model updates.
    pub fn full_model_uplink(&self) -> u64 {
        self.uplink_messages() as u64 * self.full_model_bytes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SavingsMode {
    /// Only `B` (d × r) travels; `A` is regenerated from the shared seed.
    BOnly,
    /// Both `B` (d × r) and `A` (r × d) travel.
    BAndA,
}

/// Fraction of a dense `d × d` update saved per adapted matrix.
pub fn comm_savings(d_model: usize, rank: usize, mode: SavingsMode) -> Result<f64> {
    if rank == 0 || rank > d_model {
        return Err(Error::Config(format!(
            "comm_savings needs d_model >= r >= 1, got d={d_model}, r={rank}"
        )));
    }
    let sent = match mode {
        SavingsMode::BOnly => d_model * rank,
        SavingsMode::BAndA => 2 * d_model * rank,
    };
    Ok(1.0 - sent as f64 / (d_model * d_model) as f64)
}

/// Whole-message savings: the adapter upload (tensors, Gram, summary, framing)
/// against a dense full-model upload of the same model.
pub fn message_savings(config: &TransformerConfig, aggregation: Aggregation, anchors: usize) -> f64 {
    let ours = update_message_bytes(config, aggregation, anchors) as f64;
    let full = update_message_bytes(config, Aggregation::FedavgFull, anchors) as f64;
    1.0 - ours / full
}
