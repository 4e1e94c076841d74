//! Canonical serialization of node uploads and server broadcasts.
//!
//! Node update (`GFL1`), all little-endian:
//!
//! ```text
//! magic "GFL1" | node_id u32 | round u32 | aggregation u8 | a_fixed_hash u64
//! | n_tensors u32 | tensors...
//! | B u32 | gram [f64; B·B]
//! | mean_u f64 | mean_inv_u f64 | clamped_fraction f64 | n_samples u64
//! | payload_bytes u64
//! ```
//!
//! Server broadcast (`GFB1`):
//!
//! ```text
//! magic "GFB1" | round u32 | aggregation u8 | a_fixed_hash u64
//! | n_tensors u32 | tensors... | has_consensus u8 | [B u32 | g_bar [f64; B·B]]
//! | payload_bytes u64
//! ```
//!
//! Tensors use the checkpoint layout. Shared-state tensors are named
//! `b.block{i}.{w}`, `m.block{i}.{w}` (rank 1), `head`, and in full
//! fine-tuning `theta.{name}`.

use crate::error::{Error, Result};
use crate::geometry::GramMatrix;
use crate::model::{AdaptMode, SharedModel, TransformerConfig};
use crate::numerics::Matrix;
use crate::tensorio::{put_f64, put_tensor, put_u32, put_u64, put_u8, tensor_encoded_len, NamedTensor, Reader};
use crate::uncertainty::UncertaintySummary;

use super::config::Aggregation;

pub const UPDATE_MAGIC: [u8; 4] = *b"GFL1";
pub const BROADCAST_MAGIC: [u8; 4] = *b"GFB1";

/// Bytes of an update message outside its tensors and Gram payload:
/// header (25), Gram size (4), uncertainty summary (32), trailer (8).
pub const UPDATE_FIXED_BYTES: usize = 25 + 4 + 32 + 8;

/// Broadcast bytes outside tensors and the consensus payload:
/// header (21), consensus flag (1), trailer (8).
pub const BROADCAST_FIXED_BYTES: usize = 21 + 1 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct NodeUpdateMessage {
    pub node_id: usize,
    pub round: usize,
    pub aggregation: Aggregation,
    pub a_fixed_hash: u64,
    pub tensors: Vec<NamedTensor>,
    pub gram: GramMatrix,
    pub uncertainty: UncertaintySummary,
    /// Exact length of [`NodeUpdateMessage::encode`].
    pub payload_bytes: u64,
}

fn gram_section_len(b: usize) -> usize {
    8 * b * b
}

fn tensors_len(tensors: &[NamedTensor]) -> usize {
    tensors.iter().map(NamedTensor::encoded_len).sum()
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Protocol(format!("{what} {v} does not fit in u32")))
}

impl NodeUpdateMessage {
    pub fn new(
        node_id: usize,
        round: usize,
        aggregation: Aggregation,
        a_fixed_hash: u64,
        tensors: Vec<NamedTensor>,
        gram: GramMatrix,
        uncertainty: UncertaintySummary,
    ) -> Result<Self> {
        if gram.g.rows() != gram.g.cols() {
            return Err(Error::Protocol(format!("node {node_id}: Gram is not square")));
        }
        if gram.node_id != node_id || uncertainty.node_id != node_id {
            return Err(Error::Protocol(format!(
                "node {node_id}: Gram or summary belongs to another node"
            )));
        }
        to_u32(node_id, "node id")?;
        to_u32(round, "round")?;
        let payload_bytes = (UPDATE_FIXED_BYTES + tensors_len(&tensors) + gram_section_len(gram.size())) as u64;
        Ok(Self {
            node_id,
            round,
            aggregation,
            a_fixed_hash,
            tensors,
            gram,
            uncertainty,
            payload_bytes,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.payload_bytes as usize);
        buf.extend_from_slice(&UPDATE_MAGIC);
        put_u32(&mut buf, self.node_id as u32);
        put_u32(&mut buf, self.round as u32);
        put_u8(&mut buf, self.aggregation.code());
        put_u64(&mut buf, self.a_fixed_hash);
        put_u32(&mut buf, self.tensors.len() as u32);
        for t in &self.tensors {
            put_tensor(&mut buf, t);
        }
        put_u32(&mut buf, self.gram.size() as u32);
        for &x in self.gram.g.data() {
            put_f64(&mut buf, x);
        }
        let u = &self.uncertainty;
        put_f64(&mut buf, u.mean_u);
        put_f64(&mut buf, u.mean_inv_u);
        put_f64(&mut buf, u.clamped_fraction);
        put_u64(&mut buf, u.n_samples);
        put_u64(&mut buf, self.payload_bytes);
        debug_assert_eq!(buf.len() as u64, self.payload_bytes);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&UPDATE_MAGIC)?;
        let node_id = r.u32()? as usize;
        let round = r.u32()? as usize;
        let aggregation = Aggregation::from_code(r.u8()?)?;
        let a_fixed_hash = r.u64()?;
        let n = r.u32()? as usize;
        let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let b = r.u32()? as usize;
        if gram_section_len(b) > r.remaining() {
            return Err(Error::Decode(format!("Gram of size {b} exceeds message")));
        }
        let g = Matrix::new(b, b, r.f64s(b * b)?)?;
        let mean_u = r.f64()?;
        let mean_inv_u = r.f64()?;
        let clamped_fraction = r.f64()?;
        let n_samples = r.u64()?;
        let payload_bytes = r.u64()?;
        r.finish()?;
        if payload_bytes != bytes.len() as u64 {
            return Err(Error::Decode(format!(
                "payload_bytes field says {payload_bytes}, message has {} bytes",
                bytes.len()
            )));
        }
        Ok(Self {
            node_id,
            round,
            aggregation,
            a_fixed_hash,
            tensors,
            gram: GramMatrix { g, node_id, round },
            uncertainty: UncertaintySummary {
                node_id,
                mean_u,
                mean_inv_u,
                n_samples,
                clamped_fraction,
            },
            payload_bytes,
        })
    }
}

/// Server → node message: shared state and the consensus kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Broadcast {
    pub round: usize,
    pub aggregation: Aggregation,
    pub a_fixed_hash: u64,
    pub tensors: Vec<NamedTensor>,
    pub consensus: Option<Matrix>,
    pub payload_bytes: u64,
}

impl Broadcast {
    pub fn new(
        round: usize,
        aggregation: Aggregation,
        a_fixed_hash: u64,
        tensors: Vec<NamedTensor>,
        consensus: Option<Matrix>,
    ) -> Result<Self> {
        to_u32(round, "round")?;
        let g = consensus.as_ref().map_or(0, |g| 4 + gram_section_len(g.rows()));
        let payload_bytes = (BROADCAST_FIXED_BYTES + tensors_len(&tensors) + g) as u64;
        Ok(Self {
            round,
            aggregation,
            a_fixed_hash,
            tensors,
            consensus,
            payload_bytes,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.payload_bytes as usize);
        buf.extend_from_slice(&BROADCAST_MAGIC);
        put_u32(&mut buf, self.round as u32);
        put_u8(&mut buf, self.aggregation.code());
        put_u64(&mut buf, self.a_fixed_hash);
        put_u32(&mut buf, self.tensors.len() as u32);
        for t in &self.tensors {
            put_tensor(&mut buf, t);
        }
        match &self.consensus {
            Some(g) => {
                put_u8(&mut buf, 1);
                put_u32(&mut buf, g.rows() as u32);
                for &x in g.data() {
                    put_f64(&mut buf, x);
                }
            }
            None => put_u8(&mut buf, 0),
        }
        put_u64(&mut buf, self.payload_bytes);
        debug_assert_eq!(buf.len() as u64, self.payload_bytes);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&BROADCAST_MAGIC)?;
        let round = r.u32()? as usize;
        let aggregation = Aggregation::from_code(r.u8()?)?;
        let a_fixed_hash = r.u64()?;
        let n = r.u32()? as usize;
        let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let consensus = match r.u8()? {
            0 => None,
            1 => {
                let b = r.u32()? as usize;
                if gram_section_len(b) > r.remaining() {
                    return Err(Error::Decode(format!("consensus of size {b} exceeds message")));
                }
                Some(Matrix::new(b, b, r.f64s(b * b)?)?)
            }
            other => return Err(Error::Decode(format!("bad consensus flag {other}"))),
        };
        let payload_bytes = r.u64()?;
        r.finish()?;
        if payload_bytes != bytes.len() as u64 {
            return Err(Error::Decode(format!(
                "payload_bytes field says {payload_bytes}, message has {} bytes",
                bytes.len()
            )));
        }
        Ok(Self {
            round,
            aggregation,
            a_fixed_hash,
            tensors,
            consensus,
            payload_bytes,
        })
    }
}

/// Name and shape of every shared tensor, in wire order.
pub fn shared_layout(config: &TransformerConfig, aggregation: Aggregation) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = Vec::new();
    match aggregation.adapt_mode() {
        Some(mode) => {
            for t in config.targets() {
                out.push((format!("b.{t}"), vec![d, config.lora_rank]));
            }
            if mode == AdaptMode::Dora {
                for t in config.targets() {
                    out.push((format!("m.{t}"), vec![d]));
                }
            }
        }
        None => {
            let h = config.mlp_hidden;
            for i in 0..config.n_blocks {
                for (n, dims) in [
                    ("wq", vec![d, d]),
                    ("wk", vec![d, d]),
                    ("wv", vec![d, d]),
                    ("wo", vec![d, d]),
                    ("ln1_g", vec![1, d]),
                    ("ln1_b", vec![1, d]),
                    ("ln2_g", vec![1, d]),
                    ("ln2_b", vec![1, d]),
                    ("w1", vec![d, h]),
                    ("b1", vec![1, h]),
                    ("w2", vec![h, d]),
                    ("b2", vec![1, d]),
                ] {
                    out.push((format!("theta.block{i}.{n}"), dims));
                }
            }
            out.push(("theta.lnf_g".into(), vec![1, d]));
            out.push(("theta.lnf_b".into(), vec![1, d]));
        }
    }
    out.push(("head".into(), vec![d, config.n_classes]));
    out
}

/// Exact size of an update message, from the layout alone.
pub fn update_message_bytes(config: &TransformerConfig, aggregation: Aggregation, anchors: usize) -> u64 {
    let tensors: usize = shared_layout(config, aggregation)
        .iter()
        .map(|(n, dims)| tensor_encoded_len(n.len(), dims))
        .sum();
    (UPDATE_FIXED_BYTES + tensors + gram_section_len(anchors)) as u64
}

/// Exact size of a broadcast, from the layout alone.
pub fn broadcast_bytes(config: &TransformerConfig, aggregation: Aggregation, consensus: Option<usize>) -> u64 {
    let tensors: usize = shared_layout(config, aggregation)
        .iter()
        .map(|(n, dims)| tensor_encoded_len(n.len(), dims))
        .sum();
    let g = consensus.map_or(0, |b| 4 + gram_section_len(b));
    (BROADCAST_FIXED_BYTES + tensors + g) as u64
}

/// Current values of the shared tensors of `model`, in [`shared_layout`] order.
pub fn shared_tensors(model: &SharedModel) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    if model.attachments.is_empty() {
        for (name, p) in model.params.theta() {
            out.push(NamedTensor::from_matrix(format!("theta.{name}"), &p.value));
        }
    } else {
        for att in &model.attachments {
            out.push(NamedTensor::from_matrix(format!("b.{}", att.target), &att.b.value));
        }
        for att in &model.attachments {
            if let Some(m) = &att.m {
                out.push(NamedTensor::from_vec(format!("m.{}", att.target), m.value.data()));
            }
        }
    }
    out.push(NamedTensor::from_matrix("head", &model.params.head.value));
    out
}

/// Overwrites the shared tensors of `model`. The tensor set must match the
/// model's layout exactly.
pub fn assign_shared(model: &mut SharedModel, tensors: &[NamedTensor]) -> Result<()> {
    let current = shared_tensors(model);
    if current.len() != tensors.len() {
        return Err(Error::Protocol(format!(
            "expected {} shared tensors, got {}",
            current.len(),
            tensors.len()
        )));
    }
    for (have, got) in current.iter().zip(tensors) {
        if have.name != got.name || have.dims != got.dims {
            return Err(Error::Protocol(format!(
                "shared tensor mismatch: expected {} {:?}, got {} {:?}",
                have.name, have.dims, got.name, got.dims
            )));
        }
    }
    let mut it = tensors.iter();
    let mut next = || it.next().expect("length checked").to_matrix();
    if model.attachments.is_empty() {
        for (_, p) in model.params.theta_mut() {
            p.value = next()?;
        }
    } else {
        for att in &mut model.attachments {
            att.b.value = next()?;
        }
        for att in &mut model.attachments {
            if let Some(m) = &mut att.m {
                m.value = next()?;
            }
        }
    }
    model.params.head.value = next()?;
    Ok(())
}

/// Shapes that must never appear in an upload.
#[derive(Clone, Debug)]
pub struct PrivacyShapes {
    pub forbidden: Vec<Vec<usize>>,
    /// Any tensor whose last dimension equals a raw sample length.
    pub sample_len: usize,
}

impl PrivacyShapes {
    /// Raw samples, token matrices, adapter weights and activations of one node.
    pub fn for_node(sample_len: usize, raw_dim: usize, token_dim: usize, config: &TransformerConfig) -> Self {
        let (l, d) = (config.seq_len, config.d_model);
        Self {
            forbidden: vec![
                vec![sample_len],
                vec![l, raw_dim],
                vec![l, token_dim],
                vec![token_dim, d],
                vec![l, d],
            ],
            sample_len,
        }
    }
}

/// Structural walk over a serialized update; returns one line per finding.
pub fn privacy_findings(bytes: &[u8], shapes: &PrivacyShapes, allowed: &[(String, Vec<usize>)]) -> Result<Vec<String>> {
    let msg = NodeUpdateMessage::decode(bytes)?;
    let mut findings = Vec::new();
    for t in &msg.tensors {
        if t.name.contains("adapter") {
            findings.push(format!("tensor {} is named like an adapter", t.name));
        }
        if !allowed.iter().any(|(n, d)| *n == t.name && *d == t.dims) {
            findings.push(format!(
                "tensor {} {:?} is not part of the shared layout",
                t.name, t.dims
            ));
        }
        if shapes.forbidden.contains(&t.dims) {
            findings.push(format!("tensor {} has forbidden shape {:?}", t.name, t.dims));
        }
        if t.dims.last() == Some(&shapes.sample_len) {
            findings.push(format!("tensor {} has a raw-sample-length axis", t.name));
        }
    }
    let b = msg.gram.size();
    if b == shapes.sample_len || shapes.forbidden.contains(&vec![b, b]) {
        findings.push(format!("Gram of size {b} collides with a private shape"));
    }
    Ok(findings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn message(aggregation: Aggregation) -> (NodeUpdateMessage, TransformerConfig) {
        let cfg = TransformerConfig::default();
        let model = SharedModel::init(&cfg, 3, aggregation.adapt_mode()).unwrap();
        let mut rng = SeededRng::new(1);
        let g = rng.gaussian_matrix(16, 16, 1.0);
        let msg = NodeUpdateMessage::new(
            2,
            5,
            aggregation,
            0xdead_beef,
            shared_tensors(&model),
            GramMatrix {
                g,
                node_id: 2,
                round: 5,
            },
            UncertaintySummary {
                node_id: 2,
                mean_u: 0.25,
                mean_inv_u: 4.5,
                n_samples: 512,
                clamped_fraction: 0.0,
            },
        )
        .unwrap();
        (msg, cfg)
    }

    #[test]
    fn update_round_trip_and_exact_size() {
        for agg in [Aggregation::Geolora, Aggregation::Geodora, Aggregation::FedavgFull] {
            let (msg, cfg) = message(agg);
            let bytes = msg.encode();
            assert_eq!(bytes.len() as u64, msg.payload_bytes);
            assert_eq!(msg.payload_bytes, update_message_bytes(&cfg, agg, 16));
            assert_eq!(&bytes[..4], b"GFL1");
            assert_eq!(&bytes[bytes.len() - 8..], &msg.payload_bytes.to_le_bytes());
            assert_eq!(NodeUpdateMessage::decode(&bytes).unwrap(), msg);
        }
    }

    #[test]
    fn geolora_size_by_hand() {
        // 4 targets of 32×4: each 4 + 11 ("b.block0.wq") + 4 + 16 + 8·128.
        // head 32×8: 4 + 4 + 4 + 16 + 8·256. Gram 16×16: 8·256.
        let per_b = 4 + 11 + 4 + 16 + 8 * 128;
        let head = 4 + 4 + 4 + 16 + 8 * 256;
        let expect = 69 + 4 * per_b + head + 8 * 256;
        assert_eq!(
            update_message_bytes(&TransformerConfig::default(), Aggregation::Geolora, 16),
            expect as u64
        );
    }

    #[test]
    fn decode_rejects_tampering() {
        let (msg, _) = message(Aggregation::Geolora);
        let bytes = msg.encode();
        assert!(NodeUpdateMessage::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 8] ^= 1;
        assert!(NodeUpdateMessage::decode(&bad).is_err());
        let mut bad = bytes;
        bad[12] = 9;
        assert!(NodeUpdateMessage::decode(&bad).is_err());
    }

    #[test]
    fn broadcast_round_trip() {
        let cfg = TransformerConfig::default();
        let model = SharedModel::init(&cfg, 3, Some(AdaptMode::Dora)).unwrap();
        for g in [None, Some(Matrix::identity(16))] {
            let b = Broadcast::new(1, Aggregation::Geodora, 7, shared_tensors(&model), g.clone()).unwrap();
            let bytes = b.encode();
            assert_eq!(bytes.len() as u64, b.payload_bytes);
            assert_eq!(
                b.payload_bytes,
                broadcast_bytes(&cfg, Aggregation::Geodora, g.as_ref().map(|g| g.rows()))
            );
            assert_eq!(Broadcast::decode(&bytes).unwrap(), b);
        }
    }

    #[test]
    fn assign_round_trips_and_checks_layout() {
        let cfg = TransformerConfig::default();
        let mut a = SharedModel::init(&cfg, 1, Some(AdaptMode::Dora)).unwrap();
        let mut rng = SeededRng::new(2);
        for att in &mut a.attachments {
            att.b.value = rng.gaussian_matrix(32, 4, 1.0);
        }
        let mut b = SharedModel::init(&cfg, 1, Some(AdaptMode::Dora)).unwrap();
        assign_shared(&mut b, &shared_tensors(&a)).unwrap();
        assert_eq!(shared_tensors(&a), shared_tensors(&b));
        let mut short = shared_tensors(&a);
        short.pop();
        assert!(assign_shared(&mut b, &short).is_err());
        let mut lora = SharedModel::init(&cfg, 1, Some(AdaptMode::Lora)).unwrap();
        assert!(assign_shared(&mut lora, &shared_tensors(&a)).is_err());
    }

    #[test]
    fn layout_matches_model() {
        for agg in [Aggregation::Geolora, Aggregation::Geodora, Aggregation::FedavgFull] {
            let cfg = TransformerConfig::default();
            let model = SharedModel::init(&cfg, 1, agg.adapt_mode()).unwrap();
            let layout: Vec<_> = shared_tensors(&model).into_iter().map(|t| (t.name, t.dims)).collect();
            assert_eq!(layout, shared_layout(&cfg, agg));
        }
    }

    #[test]
    fn privacy_walk_flags_adapter_tensor() {
        let (mut msg, cfg) = message(Aggregation::Geolora);
        let shapes = PrivacyShapes::for_node(128, 16, 24, &cfg);
        let allowed = shared_layout(&cfg, Aggregation::Geolora);
        assert!(privacy_findings(&msg.encode(), &shapes, &allowed).unwrap().is_empty());
        let mut rng = SeededRng::new(1);
        msg.tensors
            .push(NamedTensor::from_matrix("adapter", &rng.gaussian_matrix(24, 32, 1.0)));
        let msg = NodeUpdateMessage::new(
            msg.node_id,
            msg.round,
            msg.aggregation,
            msg.a_fixed_hash,
            msg.tensors,
            msg.gram,
            msg.uncertainty,
        )
        .unwrap();
        let f = privacy_findings(&msg.encode(), &shapes, &allowed).unwrap();
        assert_eq!(f.len(), 3, "{f:?}");
    }
}
