//! Anchor Gram matrices, kernel alignment, and the consensus kernel.
//!
//! A node embeds the `B` public anchors of its own modality and forms the
//! `B × B` cosine Gram matrix. Alignment between two Grams is the normalized
//! trace ratio `tr(X Yᵀ) / (‖X‖_F ‖Y‖_F)`; with `center = true` both Grams are
//! double-centered (`H G H`) first. The server averages the round's Grams into
//! the consensus kernel that every node aligns to in the next round.

use crate::error::{Error, Result};
use crate::model::{Adapter, Modality, SharedModel, TokenizerStub};
use crate::numerics::{cosine, Matrix, Tape, Var};

/// Public anchors of one modality, in canonical order.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub modality: Modality,
    pub samples: Vec<Vec<f64>>,
    pub concepts: Vec<usize>,
    /// Anchors generated from a shifted concept mean rather than real data.
    pub synthetic: bool,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub g: Matrix,
    pub node_id: usize,
    pub round: usize,
}

impl GramMatrix {
    pub fn size(&self) -> usize {
        self.g.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusKernel {
    pub g_bar: Matrix,
    pub contributing_nodes: usize,
    pub round: usize,
}

/// Pairwise cosine similarities between the rows of `embeddings`.
pub fn gram_from_embeddings(embeddings: &Matrix) -> Result<Matrix> {
    let b = embeddings.rows();
    for i in 0..b {
        if crate::numerics::norm(embeddings.row(i)) == 0.0 {
            return Err(Error::DegenerateVector(format!(
                "pooled embedding of anchor {i} has zero norm"
            )));
        }
    }
    let mut g = Matrix::zeros(b, b);
    for i in 0..b {
        for j in i..b {
            let c = if i == j {
                1.0
            } else {
                cosine(embeddings.row(i), embeddings.row(j))?
            };
            g.set(i, j, c)?;
            g.set(j, i, c)?;
        }
    }
    Ok(g)
}

/// Gram matrix of a node's anchors through its adapter and the shared model.
pub fn compute_gram(
    model: &SharedModel,
    stub: &TokenizerStub,
    adapter: &Adapter,
    anchors: &AnchorSet,
) -> Result<Matrix> {
    if anchors.len() < 2 {
        return Err(Error::Protocol(format!(
            "anchor set needs at least 2 anchors, got {}",
            anchors.len()
        )));
    }
    let (pooled, _) = model.embed(stub, adapter, &anchors.samples)?;
    gram_from_embeddings(&pooled)
}

/// Differentiable Gram of the rows of `pooled`.
pub fn gram_on_tape(tape: &mut Tape, pooled: Var) -> Result<Var> {
    let unit = tape.row_normalize(pooled).map_err(|e| match e {
        Error::DegenerateVector(msg) => {
            Error::DegenerateVector(format!("anchor embedding: {}", msg.replace("row", "anchor")))
        }
        other => other,
    })?;
    let ut = tape.transpose(unit)?;
    tape.matmul(unit, ut)
}

/// `H G H` with `H = I − 11ᵀ/B`.
pub fn center(g: &Matrix) -> Result<Matrix> {
    let h = centering_matrix(g.rows());
    h.matmul(g)?.matmul(&h)
}

fn centering_matrix(b: usize) -> Matrix {
    let mut h = Matrix::filled(b, b, -1.0 / b as f64);
    for i in 0..b {
        let v = h.get(i, i) + 1.0;
        h.set(i, i, v).expect("finite");
    }
    h
}

fn check_pair(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.shape() != y.shape() || x.rows() != x.cols() {
        return Err(Error::Dimension {
            op: "cka",
            left: x.shape(),
            right: y.shape(),
        });
    }
    Ok(())
}

/// Kernel alignment `tr(x yᵀ) / (‖x‖_F ‖y‖_F)`.
///
/// Both the numerator (sum of elementwise products) and the denominator
/// commute in their arguments, so `cka(x, y)` and `cka(y, x)` are bitwise
/// equal.
pub fn cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    check_pair(x, y)?;
    let nx = x.frobenius_norm();
    let ny = y.frobenius_norm();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::DegenerateVector(
            "cka: Gram matrix with zero Frobenius norm".into(),
        ));
    }
    let num: f64 = x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    Ok(num / (nx * ny))
}

/// [`cka`], optionally on double-centered kernels.
pub fn cka_with(x: &Matrix, y: &Matrix, centered: bool) -> Result<f64> {
    if centered {
        check_pair(x, y)?;
        cka(&center(x)?, &center(y)?)
    } else {
        cka(x, y)
    }
}

/// Differentiable alignment of `g` (on tape) to a constant `target`.
pub fn cka_on_tape(tape: &mut Tape, g: Var, target: &Matrix, centered: bool) -> Result<Var> {
    check_pair(tape.value(g), target)?;
    let (g, target) = if centered {
        let h = tape.constant(centering_matrix(target.rows()));
        let hg = tape.matmul(h, g)?;
        (tape.matmul(hg, h)?, center(target)?)
    } else {
        (g, target.clone())
    };
    let nt = target.frobenius_norm();
    if nt == 0.0 {
        return Err(Error::DegenerateVector("cka: target with zero Frobenius norm".into()));
    }
    if tape.value(g).frobenius_norm() == 0.0 {
        return Err(Error::DegenerateVector(
            "cka: Gram matrix with zero Frobenius norm".into(),
        ));
    }
    let t = tape.constant(target);
    let prod = tape.mul(g, t)?;
    let num = tape.sum_all(prod)?;
    let ng = tape.frob_norm(g)?;
    let ratio = tape.div(num, ng)?;
    tape.scale(ratio, 1.0 / nt)
}

/// Per-node alignment loss `1 − cka(local, ḡ)`.
pub fn geo_loss(local: &Matrix, g_bar: &ConsensusKernel, centered: bool) -> Result<f64> {
    Ok(1.0 - cka_with(local, &g_bar.g_bar, centered)?)
}

/// Entrywise mean of the round's Grams, summed in node order.
pub fn consensus(grams: &[GramMatrix]) -> Result<ConsensusKernel> {
    let first = grams
        .first()
        .ok_or_else(|| Error::Protocol("consensus over zero Gram matrices".into()))?;
    let mut acc = Matrix::zeros(first.g.rows(), first.g.cols());
    for gm in grams {
        if gm.g.shape() != first.g.shape() {
            return Err(Error::Protocol(format!(
                "node {} uploaded a {:?} Gram, expected {:?}",
                gm.node_id,
                gm.g.shape(),
                first.g.shape()
            )));
        }
        acc.axpy(1.0, &gm.g)?;
    }
    let k = grams.len() as f64;
    Ok(ConsensusKernel {
        g_bar: acc.map(|x| x / k),
        contributing_nodes: grams.len(),
        round: first.round,
    })
}

/// Server-side diagnostic `Σ_k (1 − cka(G_k, ḡ))`.
pub fn federation_geo_penalty(grams: &[GramMatrix], g_bar: &ConsensusKernel, centered: bool) -> Result<f64> {
    grams.iter().map(|g| geo_loss(&g.g, g_bar, centered)).sum()
}
