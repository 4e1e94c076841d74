//! Server state and the three aggregation rules.

use crate::error::{Error, Result};
use crate::geometry::ConsensusKernel;
use crate::model::{a_fixed_hash, SharedModel, TransformerParams};
use crate::tensorio::NamedTensor;
use crate::uncertainty::NodeWeights;

use super::config::Aggregation;
use super::ledger::CommLedger;
use super::wire::{assign_shared, shared_tensors, update_message_bytes, Broadcast, NodeUpdateMessage};

/// `θ_fixed`, the frozen `A` matrices, the aggregated adapter state and the
/// consensus kernel. Nothing is materialized densely during training.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub aggregation: Aggregation,
    pub model: SharedModel,
    pub a_fixed_hash: u64,
    pub consensus: Option<ConsensusKernel>,
    /// Rounds aggregated so far.
    pub round: usize,
    pub ledger: CommLedger,
}

impl ServerState {
    pub fn new(model: SharedModel, aggregation: Aggregation, anchors: usize) -> Result<Self> {
        if model.adapt_mode() != aggregation.adapt_mode() {
            return Err(Error::Config(format!(
                "model attachments do not match aggregation {}",
                aggregation.name()
            )));
        }
        let full = update_message_bytes(&model.config, Aggregation::FedavgFull, anchors);
        Ok(Self {
            aggregation,
            a_fixed_hash: a_fixed_hash(model.attachments.iter().map(|a| &a.a_fixed)),
            model,
            consensus: None,
            round: 0,
            ledger: CommLedger::new(full),
        })
    }

    pub fn broadcast(&self) -> Result<Broadcast> {
        Broadcast::new(
            self.round,
            self.aggregation,
            self.a_fixed_hash,
            shared_tensors(&self.model),
            self.consensus.as_ref().map(|c| c.g_bar.clone()),
        )
    }

    /// Applies the rule matching `self.aggregation`.
    pub fn aggregate(&self, updates: &[NodeUpdateMessage], weights: &NodeWeights) -> Result<Self> {
        match self.aggregation {
            Aggregation::Geolora => aggregate_geolora(self, updates, weights),
            Aggregation::Geodora => aggregate_geodora(self, updates, weights),
            Aggregation::FedavgFull => aggregate_fedavg_full(self, updates, weights),
        }
    }

    /// Dense transformer with every attachment folded in.
    pub fn materialize(&self) -> Result<TransformerParams> {
        self.model.materialize()
    }
}

/// `Σ_k w_k x_k` per shared tensor, summed in node-id order.
pub fn weighted_average(updates: &[NodeUpdateMessage], weights: &NodeWeights) -> Result<Vec<NamedTensor>> {
    let mut sorted: Vec<&NodeUpdateMessage> = updates.iter().collect();
    sorted.sort_by_key(|u| u.node_id);
    let first = *sorted
        .first()
        .ok_or_else(|| Error::Protocol("aggregation over zero updates".into()))?;
    if sorted.windows(2).any(|w| w[0].node_id == w[1].node_id) {
        return Err(Error::Protocol("duplicate node id among updates".into()));
    }
    if weights.weights.len() != sorted.len() {
        return Err(Error::Protocol(format!(
            "{} weights for {} updates",
            weights.weights.len(),
            sorted.len()
        )));
    }
    let w: Vec<f64> = sorted
        .iter()
        .map(|u| {
            weights
                .get(u.node_id)
                .ok_or_else(|| Error::Protocol(format!("no aggregation weight for node {}", u.node_id)))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(first.tensors.len());
    for (ti, t0) in first.tensors.iter().enumerate() {
        let mut acc: Vec<f64> = t0.data.iter().map(|x| w[0] * x).collect();
        for (u, &wk) in sorted.iter().zip(&w).skip(1) {
            let t = u
                .tensors
                .get(ti)
                .filter(|t| t.name == t0.name && t.dims == t0.dims)
                .ok_or_else(|| {
                    Error::Protocol(format!(
                        "node {} does not carry tensor {} {:?} at position {ti}",
                        u.node_id, t0.name, t0.dims
                    ))
                })?;
            acc.iter_mut().zip(&t.data).for_each(|(a, x)| *a += wk * x);
        }
        out.push(NamedTensor {
            name: t0.name.clone(),
            dims: t0.dims.clone(),
            data: acc,
        });
    }
    if sorted.iter().any(|u| u.tensors.len() != first.tensors.len()) {
        return Err(Error::Protocol("updates carry different tensor counts".into()));
    }
    Ok(out)
}

fn check_updates(state: &ServerState, updates: &[NodeUpdateMessage], expect: Aggregation) -> Result<()> {
    if state.aggregation != expect {
        return Err(Error::Protocol(format!(
            "server runs {}, asked to aggregate {}",
            state.aggregation.name(),
            expect.name()
        )));
    }
    for u in updates {
        if u.aggregation != expect {
            return Err(Error::Protocol(format!(
                "node {} sent a {} update to a {} server",
                u.node_id,
                u.aggregation.name(),
                expect.name()
            )));
        }
        if u.a_fixed_hash != state.a_fixed_hash {
            return Err(Error::Protocol(format!(
                "node {} a_fixed hash {:016x} does not match server {:016x}",
                u.node_id, u.a_fixed_hash, state.a_fixed_hash
            )));
        }
        if u.round != state.round {
            return Err(Error::Protocol(format!(
                "node {} sent round {} during server round {}",
                u.node_id, u.round, state.round
            )));
        }
    }
    Ok(())
}

fn aggregate_into(state: &ServerState, updates: &[NodeUpdateMessage], weights: &NodeWeights) -> Result<ServerState> {
    let avg = weighted_average(updates, weights)?;
    let mut next = state.clone();
    assign_shared(&mut next.model, &avg)?;
    Ok(next)
}

/// `b̄ = Σ w_k b_k`; `θ_new = θ_fixed + b̄ A` on export.
pub fn aggregate_geolora(
    state: &ServerState,
    updates: &[NodeUpdateMessage],
    weights: &NodeWeights,
) -> Result<ServerState> {
    check_updates(state, updates, Aggregation::Geolora)?;
    aggregate_into(state, updates, weights)
}

/// `m̄ = Σ w_k m_k`, `W = θ_fixed + b̄ A`, `θ_new = m̄ ⊙ W / ‖W‖_col`.
///
/// Fails if any column of any `W` vanishes.
pub fn aggregate_geodora(
    state: &ServerState,
    updates: &[NodeUpdateMessage],
    weights: &NodeWeights,
) -> Result<ServerState> {
    check_updates(state, updates, Aggregation::Geodora)?;
    let next = aggregate_into(state, updates, weights)?;
    next.model.materialize()?;
    Ok(next)
}

/// Dense FedAvg over every transformer weight and the head.
pub fn aggregate_fedavg_full(
    state: &ServerState,
    updates: &[NodeUpdateMessage],
    weights: &NodeWeights,
) -> Result<ServerState> {
    check_updates(state, updates, Aggregation::FedavgFull)?;
    aggregate_into(state, updates, weights)
}
