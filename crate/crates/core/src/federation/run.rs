//! Round orchestration, evaluation and the experiment record.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{cka_with, consensus, federation_geo_penalty, geo_loss, GramMatrix};
use crate::model::{Modality, ModalitySpec, SharedModel, TokenizerStub};
use crate::numerics::rng::{derive_seed, label};
use crate::numerics::{cosine, Matrix};
use crate::synthdata::{gen_anchor_set, gen_concepts, gen_node_dataset, ConceptSpace};
use crate::uncertainty::{precision_weights, NodeWeights};

use super::config::{FederationConfig, Weighting};
use super::ledger::{message_savings, CommLedger, Direction};
use super::node::{NodeState, StepRecord, TrainParams};
use super::server::ServerState;
use super::wire::{broadcast_bytes, update_message_bytes, Broadcast, NodeUpdateMessage};

/// One metrics line: a node's view of one round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeRoundMetrics {
    pub round: usize,
    pub node: usize,
    pub modality: Modality,
    /// Mean cross-entropy over the round's local steps.
    pub task_loss: f64,
    /// `1 − CKA(G_k, Ḡ)` against the consensus formed from this round's Grams.
    pub geo_loss: f64,
    pub cka_to_consensus: f64,
    pub p_k: f64,
    pub mean_u: f64,
    pub clamped_fraction: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub nodes: Vec<NodeRoundMetrics>,
    /// `Σ_k (1 − CKA(G_k, Ḡ))`.
    pub federation_penalty: f64,
    pub steps: Vec<Vec<StepRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairCka {
    pub a: Modality,
    pub b: Modality,
    pub cka: f64,
}

/// Model quality at one point of the run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSnapshot {
    pub node_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Alignment of the per-modality mean Grams, one entry per modality pair.
    pub cross_modal_cka: Vec<PairCka>,
    pub mean_cross_modal_cka: Option<f64>,
    /// Fraction of anchors whose nearest cross-modal anchor has the same concept.
    pub retrieval_top1: Option<f64>,
    /// `1 / B`.
    pub retrieval_chance: f64,
}

/// Byte costs known before any training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CommReport {
    pub update_bytes: u64,
    pub full_update_bytes: u64,
    pub broadcast_bytes: u64,
    pub broadcast_bytes_with_consensus: u64,
    pub message_savings: f64,
    pub per_matrix_savings: f64,
}

impl CommReport {
    pub fn for_config(cfg: &FederationConfig) -> Result<Self> {
        let b = cfg.anchor_count();
        Ok(Self {
            update_bytes: update_message_bytes(&cfg.model, cfg.aggregation, b),
            full_update_bytes: update_message_bytes(&cfg.model, super::Aggregation::FedavgFull, b),
            broadcast_bytes: broadcast_bytes(&cfg.model, cfg.aggregation, None),
            broadcast_bytes_with_consensus: broadcast_bytes(&cfg.model, cfg.aggregation, Some(b)),
            message_savings: message_savings(&cfg.model, cfg.aggregation, b),
            per_matrix_savings: super::ledger::comm_savings(
                cfg.model.d_model,
                cfg.model.lora_rank,
                super::ledger::SavingsMode::BOnly,
            )?,
        })
    }

    /// Total uplink bytes for `rounds` full rounds.
    pub fn expected_uplink(&self, rounds: usize, k: usize) -> u64 {
        (rounds * k) as u64 * self.update_bytes
    }

    /// Total downlink bytes: round 0 has no consensus yet.
    pub fn expected_downlink(&self, rounds: usize, k: usize) -> u64 {
        if rounds == 0 {
            return 0;
        }
        k as u64 * (self.broadcast_bytes + (rounds as u64 - 1) * self.broadcast_bytes_with_consensus)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentRecord {
    pub config: FederationConfig,
    pub init: EvalSnapshot,
    pub rounds: Vec<RoundRecord>,
    pub final_eval: EvalSnapshot,
    pub ledger: CommLedger,
    pub comm: CommReport,
    pub server: ServerState,
    pub nodes: Vec<NodeState>,
}

#[derive(Serialize)]
struct Summary<'a> {
    rounds: usize,
    nodes: usize,
    aggregation: &'static str,
    weighting: Weighting,
    lambda: f64,
    seed: u64,
    init: &'a EvalSnapshot,
    #[serde(rename = "final")]
    final_eval: &'a EvalSnapshot,
    final_p_k: Vec<f64>,
    total_uplink_bytes: u64,
    total_downlink_bytes: u64,
    full_model_uplink_bytes: u64,
    comm: &'a CommReport,
}

impl ExperimentRecord {
    /// One JSON object per round per node, newline-terminated.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rounds {
            for m in &r.nodes {
                let line = serde_json::to_string(m).map_err(|e| Error::Evaluation(e.to_string()))?;
                out.push_str(&line);
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn summary_json(&self) -> Result<String> {
        let final_p_k = self
            .rounds
            .last()
            .map(|r| r.nodes.iter().map(|m| m.p_k).collect())
            .unwrap_or_default();
        let s = Summary {
            rounds: self.rounds.len(),
            nodes: self.config.k(),
            aggregation: self.config.aggregation.name(),
            weighting: self.config.weighting,
            lambda: self.config.lambda,
            seed: self.config.seed,
            init: &self.init,
            final_eval: &self.final_eval,
            final_p_k,
            total_uplink_bytes: self.ledger.total_uplink,
            total_downlink_bytes: self.ledger.total_downlink,
            full_model_uplink_bytes: self.ledger.full_model_uplink(),
            comm: &self.comm,
        };
        serde_json::to_string_pretty(&s).map_err(|e| Error::Evaluation(e.to_string()))
    }

    /// Per-round `p_k` of one node.
    pub fn p_k_trace(&self, node: usize) -> Vec<f64> {
        self.rounds.iter().map(|r| r.nodes[node].p_k).collect()
    }
}

/// Serialized traffic of one round, for audits.
#[derive(Clone, Debug)]
pub struct RoundTraffic {
    pub broadcast: Vec<u8>,
    pub uploads: Vec<Vec<u8>>,
}

/// A federation in progress: server, nodes, and the shared concept space.
pub struct Federation {
    pub config: FederationConfig,
    pub space: ConceptSpace,
    pub server: ServerState,
    pub nodes: Vec<NodeState>,
    pub rounds: Vec<RoundRecord>,
}

impl Federation {
    pub fn setup(config: &FederationConfig) -> Result<Self> {
        config.validate_setup()?;
        let cfg = config.clone();
        let model = SharedModel::init(&cfg.model, cfg.model_seed(), cfg.aggregation.adapt_mode())?;
        let space = gen_concepts(
            cfg.model.n_classes,
            cfg.data.latent_dim,
            cfg.data.noise_sigma,
            derive_seed(cfg.seed, &[label("concepts")]),
        )?;
        let specs: Vec<ModalitySpec> = cfg
            .nodes
            .iter()
            .map(|n| ModalitySpec::with_defaults(n.modality, cfg.model.seq_len))
            .collect::<Result<_>>()?;
        let anchors = gen_anchor_set(
            &space,
            &cfg.anchors,
            &specs,
            cfg.data.raw_dim,
            derive_seed(cfg.seed, &[label("anchors")]),
        )?;
        let tokenizer_seed = derive_seed(cfg.seed, &[label("tokenizer")]);
        let mut nodes = Vec::with_capacity(cfg.k());
        for (id, (n, spec)) in cfg.nodes.iter().zip(&specs).enumerate() {
            let seed = cfg.node_seed(id);
            let stub = TokenizerStub::new(*spec, cfg.data.raw_dim, tokenizer_seed)?;
            let train = gen_node_dataset(&space, spec, cfg.data.raw_dim, id, n.samples, n.corruption, seed)?;
            let test = gen_node_dataset(
                &space,
                spec,
                cfg.data.raw_dim,
                id,
                cfg.data.test_samples,
                n.corruption,
                derive_seed(seed, &[label("test")]),
            )?;
            let node_anchors = anchors[&n.modality].clone();
            nodes.push(NodeState::new(
                id,
                seed,
                cfg.aggregation,
                stub,
                train,
                test,
                node_anchors,
                model.clone(),
            )?);
        }
        let server = ServerState::new(model, cfg.aggregation, cfg.anchor_count())?;
        Ok(Self {
            config: cfg,
            space,
            server,
            nodes,
            rounds: Vec::new(),
        })
    }

    /// Broadcast, local rounds, consensus, weighting, aggregation.
    pub fn step_round(&mut self) -> Result<RoundTraffic> {
        let r = self.server.round;
        let params = TrainParams::from_config(&self.config);

        let broadcast = self.server.broadcast()?.encode();
        let received = Broadcast::decode(&broadcast)?;
        for node in &mut self.nodes {
            node.receive(&received).map_err(|e| node_error(r, node.id, e))?;
            self.server
                .ledger
                .record(r, node.id, Direction::Downlink, broadcast.len() as u64);
        }

        let run = |node: &mut NodeState| node.local_round(r, &params).map_err(|e| node_error(r, node.id, e));
        let outputs: Vec<_> = if self.config.parallel {
            self.nodes.par_iter_mut().map(run).collect::<Result<_>>()?
        } else {
            self.nodes.iter_mut().map(run).collect::<Result<_>>()?
        };

        let mut uploads = Vec::with_capacity(outputs.len());
        let mut updates = Vec::with_capacity(outputs.len());
        let mut steps = Vec::with_capacity(outputs.len());
        for out in outputs {
            let bytes = out.message.encode();
            self.server
                .ledger
                .record(r, out.message.node_id, Direction::Uplink, bytes.len() as u64);
            updates.push(NodeUpdateMessage::decode(&bytes)?);
            uploads.push(bytes);
            steps.push(out.steps);
        }

        let grams: Vec<GramMatrix> = updates.iter().map(|u| u.gram.clone()).collect();
        let kernel = consensus(&grams)?;
        let ids: Vec<usize> = updates.iter().map(|u| u.node_id).collect();
        let weights = match self.config.weighting {
            Weighting::Uniform => NodeWeights::uniform(&ids)?,
            Weighting::Precision => {
                let summaries: Vec<_> = updates.iter().map(|u| u.uncertainty).collect();
                precision_weights(&summaries, self.config.weight_mode)?
            }
        };
        let mut next = self.server.aggregate(&updates, &weights)?;
        let center = self.config.center_kernels;
        let penalty = federation_geo_penalty(&grams, &kernel, center)?;

        let mut metrics = Vec::with_capacity(updates.len());
        for (u, st) in updates.iter().zip(&steps) {
            let gl = geo_loss(&u.gram.g, &kernel, center)?;
            let task_loss = st.iter().map(|s| s.task_loss).sum::<f64>() / st.len() as f64;
            metrics.push(NodeRoundMetrics {
                round: r,
                node: u.node_id,
                modality: self.nodes[u.node_id].stub.spec.modality,
                task_loss,
                geo_loss: gl,
                cka_to_consensus: 1.0 - gl,
                p_k: weights.get(u.node_id).expect("weight per update"),
                mean_u: u.uncertainty.mean_u,
                clamped_fraction: u.uncertainty.clamped_fraction,
                uplink_bytes: u.payload_bytes,
                downlink_bytes: broadcast.len() as u64,
            });
        }
        next.consensus = Some(kernel);
        next.round = r + 1;
        self.server = next;
        self.rounds.push(RoundRecord {
            round: r,
            nodes: metrics,
            federation_penalty: penalty,
            steps,
        });
        Ok(RoundTraffic { broadcast, uploads })
    }

    /// Evaluates every node with the server's current shared state.
    pub fn evaluate(&self) -> Result<EvalSnapshot> {
        let mut evaluated = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let mut view = n.clone();
            view.model = self.server.model.clone();
            evaluated.push(view);
        }
        evaluate_nodes(&evaluated, self.config.center_kernels)
    }

    pub fn finish(self, init: EvalSnapshot) -> Result<ExperimentRecord> {
        let final_eval = self.evaluate()?;
        Ok(ExperimentRecord {
            comm: CommReport::for_config(&self.config)?,
            ledger: self.server.ledger.clone(),
            config: self.config,
            init,
            rounds: self.rounds,
            final_eval,
            server: self.server,
            nodes: self.nodes,
        })
    }
}

fn node_error(round: usize, node: usize, e: Error) -> Error {
    match e {
        e @ (Error::Training { .. } | Error::Node { .. }) => e,
        other => Error::Node {
            round,
            node,
            source: Box::new(other),
        },
    }
}

/// Accuracy, cross-modal Gram alignment and anchor retrieval.
pub fn evaluate_nodes(nodes: &[NodeState], center: bool) -> Result<EvalSnapshot> {
    let node_accuracy = nodes.iter().map(NodeState::test_accuracy).collect::<Result<Vec<_>>>()?;
    let mean_accuracy = node_accuracy.iter().sum::<f64>() / node_accuracy.len().max(1) as f64;

    let mut by_modality: BTreeMap<Modality, Vec<&NodeState>> = BTreeMap::new();
    for n in nodes {
        by_modality.entry(n.stub.spec.modality).or_default().push(n);
    }
    let mut grams: Vec<(Modality, Matrix)> = Vec::new();
    let mut reps: Vec<(Modality, Matrix, &[usize])> = Vec::new();
    for (m, members) in &by_modality {
        let mut acc: Option<Matrix> = None;
        for n in members {
            let g = n.gram()?;
            match &mut acc {
                Some(a) => a.axpy(1.0, &g)?,
                None => acc = Some(g),
            }
        }
        let mean = acc.expect("non-empty group").map(|x| x / members.len() as f64);
        grams.push((*m, mean));
        let rep = members[0];
        reps.push((*m, rep.anchor_embeddings()?, &rep.anchors.concepts));
    }

    let mut cross_modal_cka = Vec::new();
    let mut retrieval = Vec::new();
    for i in 0..grams.len() {
        for j in i + 1..grams.len() {
            cross_modal_cka.push(PairCka {
                a: grams[i].0,
                b: grams[j].0,
                cka: cka_with(&grams[i].1, &grams[j].1, center)?,
            });
            retrieval.push(retrieval_top1(&reps[i].1, reps[i].2, &reps[j].1, reps[j].2)?);
            retrieval.push(retrieval_top1(&reps[j].1, reps[j].2, &reps[i].1, reps[i].2)?);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let ckas: Vec<f64> = cross_modal_cka.iter().map(|p| p.cka).collect();
    let b = nodes.first().map_or(1, |n| n.anchors.len());
    Ok(EvalSnapshot {
        node_accuracy,
        mean_accuracy,
        mean_cross_modal_cka: mean(&ckas),
        cross_modal_cka,
        retrieval_top1: mean(&retrieval),
        retrieval_chance: 1.0 / b as f64,
    })
}

/// For each query anchor, whether its most similar target anchor shares its concept.
pub fn retrieval_top1(query: &Matrix, qc: &[usize], target: &Matrix, tc: &[usize]) -> Result<f64> {
    let mut hits = 0usize;
    for (i, &concept) in qc.iter().enumerate().take(query.rows()) {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for j in 0..target.rows() {
            let c = cosine(query.row(i), target.row(j))?;
            if c > best.0 {
                best = (c, j);
            }
        }
        if tc[best.1] == concept {
            hits += 1;
        }
    }
    Ok(hits as f64 / query.rows() as f64)
}

/// Runs the configured number of rounds and returns the full record.
///
/// With `rounds = 0` the record holds only the initial evaluation.
pub fn run_federation(config: &FederationConfig) -> Result<ExperimentRecord> {
    let mut fed = Federation::setup(config)?;
    let init = fed.evaluate()?;
    for _ in 0..config.rounds {
        fed.step_round()?;
    }
    fed.finish(init)
}
