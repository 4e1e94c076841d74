//! Oracles and fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::HashSet;

use geofed::federation::{
    aggregate_geodora, aggregate_geolora, gather_sequences, local_objective, privacy_findings, shared_layout,
    shared_tensors, Aggregation, Alignment, Broadcast, Federation, FederationConfig, NodeConfig, NodeUpdateMessage,
    PrivacyShapes, ServerState,
};
use geofed::geometry::GramMatrix;
use geofed::model::{AttnWeight, Leaves, Modality, SharedModel, TransformerConfig};
use geofed::numerics::{column_norms, grad_check, matmul, GradCheckReport, Matrix, Param, SeededRng};
use geofed::uncertainty::{NodeWeights, UncertaintySummary};
use geofed::Result;

/// One block, `d = 2`, one head, `r = 1`, a single attachment on `wq`.
pub fn tiny_config() -> TransformerConfig {
    TransformerConfig {
        d_model: 2,
        n_blocks: 1,
        n_heads: 1,
        mlp_hidden: 2,
        n_classes: 2,
        lora_rank: 1,
        lora_targets: vec![AttnWeight::Wq],
        seq_len: 2,
    }
}

pub fn server(cfg: &TransformerConfig, aggregation: Aggregation, seed: u64, anchors: usize) -> ServerState {
    let model = SharedModel::init(cfg, seed, aggregation.adapt_mode()).unwrap();
    ServerState::new(model, aggregation, anchors).unwrap()
}

/// A node update with random `b`, positive random `m` and a random head.
pub fn random_update(state: &ServerState, node_id: usize, rng: &mut SeededRng) -> NodeUpdateMessage {
    let mut model = state.model.clone();
    for att in &mut model.attachments {
        let (r, c) = att.b.value.shape();
        att.b.value = rng.gaussian_matrix(r, c, 0.5);
        if let Some(m) = &mut att.m {
            let d = m.value.cols();
            m.value = rng.uniform_matrix(1, d, 0.5, 2.0);
        }
    }
    let (r, c) = model.params.head.value.shape();
    model.params.head.value = rng.gaussian_matrix(r, c, 1.0);
    let b = state.consensus.as_ref().map_or(2, |k| k.g_bar.rows());
    message(state, node_id, &model, Matrix::identity(b), 4.0)
}

pub fn message(
    state: &ServerState,
    node_id: usize,
    model: &SharedModel,
    g: Matrix,
    mean_inv_u: f64,
) -> NodeUpdateMessage {
    NodeUpdateMessage::new(
        node_id,
        state.round,
        state.aggregation,
        state.a_fixed_hash,
        shared_tensors(model),
        GramMatrix {
            g,
            node_id,
            round: state.round,
        },
        UncertaintySummary {
            node_id,
            mean_u: 1.0 / mean_inv_u,
            mean_inv_u,
            n_samples: 32,
            clamped_fraction: 0.0,
        },
    )
    .unwrap()
}

pub fn random_weights(ids: &[usize], rng: &mut SeededRng) -> NodeWeights {
    let raw: Vec<f64> = ids.iter().map(|_| rng.uniform_range(0.1, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    NodeWeights {
        weights: ids.iter().zip(&raw).map(|(&id, &w)| (id, w / total)).collect(),
        normalizer: total,
    }
}

fn tensor_matrix(u: &NodeUpdateMessage, name: &str) -> Matrix {
    u.tensor(name).unwrap().to_matrix().unwrap()
}

/// Scalar-loop `θ + (Σ w_k b_k) a`.
pub fn dense_lora_oracle(theta: &Matrix, a: &Matrix, bs: &[Matrix], w: &[f64]) -> Matrix {
    let (d, r) = bs[0].shape();
    let mut out = theta.clone();
    for i in 0..d {
        for j in 0..theta.cols() {
            let mut s = 0.0;
            for k in 0..r {
                let bbar: f64 = bs.iter().zip(w).map(|(b, wk)| wk * b.get(i, k)).sum();
                s += bbar * a.get(k, j);
            }
            out.set(i, j, theta.get(i, j) + s).unwrap();
        }
    }
    out
}

/// Average, compose, normalize each column, scale by the averaged magnitude.
pub fn dense_dora_oracle(theta: &Matrix, a: &Matrix, bs: &[Matrix], ms: &[Vec<f64>], w: &[f64]) -> Matrix {
    let merged = dense_lora_oracle(theta, a, bs, w);
    let mut out = merged.clone();
    for j in 0..merged.cols() {
        let norm = (0..merged.rows()).map(|i| merged.get(i, j).powi(2)).sum::<f64>().sqrt();
        let mbar: f64 = ms.iter().zip(w).map(|(m, wk)| wk * m[j]).sum();
        for i in 0..merged.rows() {
            out.set(i, j, mbar * merged.get(i, j) / norm).unwrap();
        }
    }
    out
}

/// Max deviation of the server's materialized `wq` from the scalar oracle on
/// a two-node `2×2, r = 1` federation.
pub fn tiny_aggregation_error(aggregation: Aggregation, seed: u64) -> f64 {
    let cfg = tiny_config();
    let s = server(&cfg, aggregation, seed, 2);
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    let updates: Vec<_> = (0..2).map(|k| random_update(&s, k, &mut rng)).collect();
    let weights = random_weights(&[0, 1], &mut rng);
    let w: Vec<f64> = weights.weights.iter().map(|(_, w)| *w).collect();
    let next = match aggregation {
        Aggregation::Geolora => aggregate_geolora(&s, &updates, &weights).unwrap(),
        Aggregation::Geodora => aggregate_geodora(&s, &updates, &weights).unwrap(),
        Aggregation::FedavgFull => unreachable!("no attachments to check"),
    };
    let att = &s.model.attachments[0];
    let theta = &s.model.params.attn(att.target).value;
    let name = format!("b.{}", att.target);
    let bs: Vec<Matrix> = updates.iter().map(|u| tensor_matrix(u, &name)).collect();
    let expect = match aggregation {
        Aggregation::Geolora => dense_lora_oracle(theta, &att.a_fixed, &bs, &w),
        _ => {
            let ms: Vec<Vec<f64>> = updates
                .iter()
                .map(|u| u.tensor(&format!("m.{}", att.target)).unwrap().data.clone())
                .collect();
            dense_dora_oracle(theta, &att.a_fixed, &bs, &ms, &w)
        }
    };
    let got = next.materialize().unwrap();
    got.attn(att.target).value.max_abs_diff(&expect)
}

/// `max |(Σ w_k b_k) A − Σ w_k (b_k A)|` over every target of a random
/// `K`-node federation on the default model.
pub fn linearity_error(k: usize, seed: u64) -> f64 {
    let cfg = TransformerConfig::default();
    let s = server(&cfg, Aggregation::Geolora, seed, 2);
    let mut rng = SeededRng::new(seed ^ 0x11ea);
    let ids: Vec<usize> = (0..k).collect();
    let updates: Vec<_> = ids.iter().map(|&i| random_update(&s, i, &mut rng)).collect();
    let weights = random_weights(&ids, &mut rng);
    let next = aggregate_geolora(&s, &updates, &weights).unwrap();
    let mut worst = 0.0f64;
    for att in &next.model.attachments {
        let averaged_then_multiplied = matmul(&att.b.value, &att.a_fixed).unwrap();
        let name = format!("b.{}", att.target);
        let mut products = Matrix::zeros(cfg.d_model, cfg.d_model);
        for (u, (_, w)) in updates.iter().zip(&weights.weights) {
            let ba = matmul(&tensor_matrix(u, &name), &att.a_fixed).unwrap();
            products.axpy(*w, &ba).unwrap();
        }
        worst = worst.max(averaged_then_multiplied.max_abs_diff(&products));
    }
    worst
}

/// Small federation that trains in well under a second per round.
pub fn quick_config(aggregation: Aggregation, modalities: &[Modality], seed: u64) -> FederationConfig {
    let nodes = modalities
        .iter()
        .map(|&m| NodeConfig {
            samples: 96,
            ..NodeConfig::new(m)
        })
        .collect();
    let mut cfg = FederationConfig::new(nodes, aggregation, 1.0);
    cfg.seed = seed;
    cfg.rounds = 3;
    cfg.local_steps = 2;
    cfg.batch_size = 8;
    cfg.lap_subsample = 32;
    cfg.data.test_samples = 32;
    cfg
}

/// Gradient check of a node's full local objective (task + λ·alignment)
/// with respect to its adapter, every `b` and the head.
///
/// The node is taken after one federated round so `b ≠ 0` and a consensus
/// kernel exists. DoRA magnitudes stay fixed: the alignment path sees them
/// detached by design, so finite differences would disagree with it.
pub fn objective_grad_check(cfg: &FederationConfig, batch: usize, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut fed = Federation::setup(cfg)?;
    fed.step_round()?;
    let g_bar = fed.server.consensus.clone().expect("consensus after one round").g_bar;
    let node = &fed.nodes[0];
    let model = node.model.clone();
    let idx: Vec<usize> = (0..batch).collect();
    let tokens = gather_sequences(node.train_tokens(), &idx, model.config.seq_len)?;
    let labels: Vec<usize> = idx.iter().map(|&i| node.train.labels[i]).collect();
    let anchor_tokens = node.anchor_tokens().clone();

    let mut params = vec![Param::trainable(node.adapter.w.value.clone())];
    params.extend(model.attachments.iter().map(|a| Param::trainable(a.b.value.clone())));
    params.push(Param::trainable(model.params.head.value.clone()));
    let n_b = model.attachments.len();

    grad_check(
        |tape, vars| {
            let theta = model
                .params
                .theta()
                .iter()
                .map(|(_, p)| tape.constant(p.value.clone()))
                .collect();
            let m = model
                .attachments
                .iter()
                .map(|a| a.m.as_ref().map(|m| tape.constant(m.value.clone())))
                .collect();
            let leaves = Leaves {
                theta,
                b: vars[1..=n_b].to_vec(),
                m,
                head: vars[n_b + 1],
            };
            let binding = model.bind_leaves(tape, &leaves)?;
            let alignment = Alignment {
                anchor_tokens: &anchor_tokens,
                g_bar: &g_bar,
                lambda: cfg.lambda,
                center: cfg.center_kernels,
            };
            Ok(local_objective(&model, tape, &binding, vars[0], &tokens, &labels, Some(alignment))?.total)
        },
        &mut params,
        eps,
        tol,
    )
}

/// Every 8-byte window of `bytes`, read as a little-endian bit pattern.
fn windows(bytes: &[u8]) -> HashSet<u64> {
    bytes
        .windows(8)
        .map(|w| u64::from_le_bytes(w.try_into().unwrap()))
        .collect()
}

/// Structural and byte-level privacy findings for one round's traffic.
///
/// Besides the structural walk, every adapter entry and every raw sample
/// value of the uploading node is searched for in the serialized bytes.
pub fn round_privacy_findings(fed: &Federation, broadcast: &[u8], uploads: &[Vec<u8>]) -> Result<Vec<String>> {
    let cfg = &fed.config;
    let layout = shared_layout(&cfg.model, cfg.aggregation);
    let mut findings = Vec::new();
    for bytes in uploads {
        let msg = NodeUpdateMessage::decode(bytes)?;
        let node = &fed.nodes[msg.node_id];
        let spec = node.stub.spec;
        let shapes = PrivacyShapes::for_node(node.stub.sample_len(), cfg.data.raw_dim, spec.token_dim, &cfg.model);
        findings.extend(privacy_findings(bytes, &shapes, &layout)?);
        let seen = windows(bytes);
        let private = node
            .adapter
            .w
            .value
            .data()
            .iter()
            .chain(node.train.samples.iter().flatten())
            .filter(|x| **x != 0.0);
        if let Some(x) = private.into_iter().find(|x| seen.contains(&x.to_bits())) {
            findings.push(format!("node {} upload contains private value {x:e}", msg.node_id));
        }
    }
    let b = Broadcast::decode(broadcast)?;
    for t in &b.tensors {
        if !layout.iter().any(|(n, d)| *n == t.name && *d == t.dims) {
            findings.push(format!("broadcast tensor {} {:?} is not shared", t.name, t.dims));
        }
    }
    Ok(findings)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn column_norm_error(w: &Matrix) -> f64 {
    column_norms(w).iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max)
}
