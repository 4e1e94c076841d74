//! One federation participant: private data, adapter, local training.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{cka_on_tape, gram_from_embeddings, gram_on_tape, AnchorSet, GramMatrix};
use crate::model::{a_fixed_hash, Adapter, Binding, ModalitySpec, SharedModel, TokenizerStub};
use crate::numerics::rng::{label, SeededRng};
use crate::numerics::{Matrix, Param, Tape, Var};
use crate::synthdata::NodeDataset;
use crate::uncertainty::{node_summary, UncertaintySummary};

use super::config::{Aggregation, FederationConfig};
use super::wire::{assign_shared, shared_tensors, Broadcast, NodeUpdateMessage};

/// Hyperparameters of one local round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainParams {
    pub lambda: f64,
    pub learning_rate: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub center_kernels: bool,
    pub u_min: f64,
    pub lap_subsample: usize,
}

impl TrainParams {
    pub fn from_config(cfg: &FederationConfig) -> Self {
        Self {
            lambda: cfg.lambda,
            learning_rate: cfg.learning_rate,
            local_steps: cfg.local_steps,
            batch_size: cfg.batch_size,
            center_kernels: cfg.center_kernels,
            u_min: cfg.u_min,
            lap_subsample: cfg.lap_subsample,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub task_loss: f64,
    /// `1 − CKA(G, Ḡ)` when the alignment term was active.
    pub geo_loss: Option<f64>,
    pub total_loss: f64,
}

#[derive(Clone, Debug)]
pub struct NodeRoundOutput {
    pub message: NodeUpdateMessage,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: usize,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub stub: TokenizerStub,
    pub adapter: Adapter,
    pub train: NodeDataset,
    pub test: NodeDataset,
    pub anchors: AnchorSet,
    /// The node's copy of the shared model, refreshed by each broadcast.
    pub model: SharedModel,
    /// Consensus kernel from the latest broadcast.
    pub g_bar: Option<Matrix>,
    a_hash: u64,
    train_tokens: Matrix,
    anchor_tokens: Matrix,
    rng: SeededRng,
}

/// Rows of the sequences `idx` from stacked `n·L × w` tokens.
pub fn gather_sequences(tokens: &Matrix, idx: &[usize], seq_len: usize) -> Result<Matrix> {
    let w = tokens.cols();
    let mut data = Vec::with_capacity(idx.len() * seq_len * w);
    for &i in idx {
        for r in i * seq_len..(i + 1) * seq_len {
            data.extend_from_slice(tokens.row(r));
        }
    }
    Matrix::new(idx.len() * seq_len, w, data)
}

impl NodeState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        seed: u64,
        aggregation: Aggregation,
        stub: TokenizerStub,
        train: NodeDataset,
        test: NodeDataset,
        anchors: AnchorSet,
        model: SharedModel,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config(format!("node {id} has no training samples")));
        }
        if anchors.len() < 2 {
            return Err(Error::Protocol(format!("node {id} needs at least 2 anchors")));
        }
        let spec: ModalitySpec = stub.spec;
        if spec.seq_len != model.config.seq_len {
            return Err(Error::Config(format!(
                "node {id}: modality seq_len {} differs from model seq_len {}",
                spec.seq_len, model.config.seq_len
            )));
        }
        let mut arng = SeededRng::derived(seed, &[label("adapter")]);
        let adapter = Adapter::new(spec.token_dim, model.config.d_model, &mut arng);
        let train_tokens = stub.tokenize_batch(&train.samples)?;
        let anchor_tokens = stub.tokenize_batch(&anchors.samples)?;
        let a_hash = a_fixed_hash(model.attachments.iter().map(|a| &a.a_fixed));
        Ok(Self {
            id,
            seed,
            aggregation,
            stub,
            adapter,
            train,
            test,
            anchors,
            model,
            g_bar: None,
            a_hash,
            train_tokens,
            anchor_tokens,
            rng: SeededRng::derived(seed, &[label("minibatch")]),
        })
    }

    pub fn a_fixed_hash(&self) -> u64 {
        self.a_hash
    }

    /// Tokenized training samples, `N·L × token_dim`.
    pub fn train_tokens(&self) -> &Matrix {
        &self.train_tokens
    }

    /// Tokenized anchors, `B·L × token_dim`.
    pub fn anchor_tokens(&self) -> &Matrix {
        &self.anchor_tokens
    }

    /// Installs the shared state and consensus kernel of a broadcast.
    pub fn receive(&mut self, b: &Broadcast) -> Result<()> {
        if b.aggregation != self.aggregation || b.a_fixed_hash != self.a_hash {
            return Err(Error::Protocol(format!(
                "node {}: broadcast for {} / {:016x} does not match local {} / {:016x}",
                self.id,
                b.aggregation.name(),
                b.a_fixed_hash,
                self.aggregation.name(),
                self.a_hash
            )));
        }
        assign_shared(&mut self.model, &b.tensors)?;
        self.g_bar = b.consensus.clone();
        Ok(())
    }

    /// Pooled embeddings and logits of tokenized sequences under the current weights.
    pub fn embed_tokens(&self, tokens: &Matrix) -> Result<(Matrix, Matrix)> {
        self.model.embed_tokens(tokens, &self.adapter.w.value)
    }

    pub fn anchor_embeddings(&self) -> Result<Matrix> {
        Ok(self.embed_tokens(&self.anchor_tokens)?.0)
    }

    pub fn gram(&self) -> Result<Matrix> {
        gram_from_embeddings(&self.anchor_embeddings()?)
    }

    /// Top-1 accuracy on the node's held-out set.
    pub fn test_accuracy(&self) -> Result<f64> {
        let tokens = self.stub.tokenize_batch(&self.test.samples)?;
        let (_, logits) = self.embed_tokens(&tokens)?;
        let hits = (0..logits.rows())
            .filter(|&i| argmax(logits.row(i)) == self.test.labels[i])
            .count();
        Ok(hits as f64 / logits.rows() as f64)
    }

    /// Local SGD on `task + λ·(1 − CKA(G, Ḡ))`, then the update message.
    ///
    /// The alignment term is skipped while no consensus kernel exists.
    pub fn local_round(&mut self, round: usize, p: &TrainParams) -> Result<NodeRoundOutput> {
        let mut steps = Vec::with_capacity(p.local_steps);
        for step in 0..p.local_steps {
            let rec = self.sgd_step(p).map_err(|e| match e {
                Error::NonFinite(reason) => Error::Training {
                    round,
                    node: self.id,
                    step,
                    reason,
                },
                Error::NumericOverflow { block, stage } => Error::Training {
                    round,
                    node: self.id,
                    step,
                    reason: format!("overflow in block {block} at {stage}"),
                },
                other => other,
            })?;
            steps.push(StepRecord { step, ..rec });
        }
        let message = self.update_message(round, p)?;
        Ok(NodeRoundOutput { message, steps })
    }

    fn sgd_step(&mut self, p: &TrainParams) -> Result<StepRecord> {
        let seq_len = self.model.config.seq_len;
        let mut tape = Tape::new();
        let binding = self.model.bind(&mut tape)?;
        let adapter = self.adapter.w.register(&mut tape);
        let idx = self.rng.sample_indices(self.train.len(), p.batch_size);
        let tokens = gather_sequences(&self.train_tokens, &idx, seq_len)?;
        let labels: Vec<usize> = idx.iter().map(|&i| self.train.labels[i]).collect();
        let alignment = self.g_bar.as_ref().filter(|_| p.lambda > 0.0).map(|g| Alignment {
            anchor_tokens: &self.anchor_tokens,
            g_bar: g,
            lambda: p.lambda,
            center: p.center_kernels,
        });
        let obj = local_objective(&self.model, &mut tape, &binding, adapter, &tokens, &labels, alignment)?;
        let (task, loss) = (obj.task, obj.total);
        let geo_loss = obj.geo.map(|g| tape.scalar(g));
        let task_loss = tape.scalar(task);
        let total_loss = tape.scalar(loss);
        if !total_loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {total_loss}")));
        }
        let grads = tape.backward(loss)?;
        let apply = |param: &mut Param, var: Var| -> Result<()> {
            param.grad = grads.get_or_zeros(var, param.shape());
            param.sgd_step(p.learning_rate)
        };
        apply(&mut self.adapter.w, adapter)?;
        for (att, (&b, m)) in self.model.attachments.iter_mut().zip(binding.b.iter().zip(&binding.m)) {
            apply(&mut att.b, b)?;
            if let (Some(param), Some(var)) = (att.m.as_mut(), m) {
                apply(param, *var)?;
            }
        }
        for ((_, param), &var) in self.model.params.theta_mut().into_iter().zip(&binding.theta) {
            if param.trainable {
                apply(param, var)?;
            }
        }
        apply(&mut self.model.params.head, binding.head)?;
        Ok(StepRecord {
            step: 0,
            task_loss,
            geo_loss,
            total_loss,
        })
    }

    fn update_message(&self, round: usize, p: &TrainParams) -> Result<NodeUpdateMessage> {
        let anchor_emb = self.anchor_embeddings()?;
        let gram = GramMatrix {
            g: gram_from_embeddings(&anchor_emb)?,
            node_id: self.id,
            round,
        };
        let summary = self.lap_summary(round, &anchor_emb, p)?;
        NodeUpdateMessage::new(
            self.id,
            round,
            self.aggregation,
            self.a_hash,
            shared_tensors(&self.model),
            gram,
            summary,
        )
    }

    /// LAP uncertainty over a per-round subsample of the local data.
    pub fn lap_summary(&self, round: usize, anchor_emb: &Matrix, p: &TrainParams) -> Result<UncertaintySummary> {
        let mut rng = SeededRng::derived(self.seed, &[label("lap"), round as u64]);
        let idx = rng.sample_indices(self.train.len(), p.lap_subsample);
        let tokens = gather_sequences(&self.train_tokens, &idx, self.model.config.seq_len)?;
        let (emb, _) = self.embed_tokens(&tokens)?;
        node_summary(self.id, &emb, anchor_emb, self.train.len() as u64, p.u_min)
    }
}

/// The alignment term of the local objective.
#[derive(Clone, Copy, Debug)]
pub struct Alignment<'a> {
    pub anchor_tokens: &'a Matrix,
    pub g_bar: &'a Matrix,
    pub lambda: f64,
    pub center: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub task: Var,
    /// `1 − CKA(G, Ḡ)`, present when alignment is active.
    pub geo: Option<Var>,
    pub total: Var,
}

/// `CE(logits, labels) + λ·(1 − CKA(G_anchors, Ḡ))` on `tape`.
///
/// Task logits use the binding's live weights; the anchor Gram uses its
/// geometry weights, so DoRA magnitudes receive no alignment gradient.
pub fn local_objective(
    model: &SharedModel,
    tape: &mut Tape,
    binding: &Binding,
    adapter: Var,
    tokens: &Matrix,
    labels: &[usize],
    alignment: Option<Alignment<'_>>,
) -> Result<ObjectiveVars> {
    let out = model.embed_vars(tape, &binding.task, tokens, adapter)?;
    let task = tape.softmax_cross_entropy(out.logits, labels)?;
    let Some(al) = alignment else {
        return Ok(ObjectiveVars {
            task,
            geo: None,
            total: task,
        });
    };
    let a = model.embed_vars(tape, &binding.geo, al.anchor_tokens, adapter)?;
    let g = gram_on_tape(tape, a.pooled)?;
    let c = cka_on_tape(tape, g, al.g_bar, al.center)?;
    let one = tape.constant(Matrix::scalar(1.0));
    let geo = tape.sub(one, c)?;
    let weighted = tape.scale(geo, al.lambda)?;
    let total = tape.add(task, weighted)?;
    Ok(ObjectiveVars {
        task,
        geo: Some(geo),
        total,
    })
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_picks_whole_sequences() {
        let t = Matrix::new(6, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = gather_sequences(&t, &[2, 0], 2).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, -1.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
