//! Frozen-A low-rank attachments (LoRA and the magnitude/direction DoRA form).

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::rng::{label, SeededRng};
use crate::numerics::{column_norms, matmul, Matrix, Param};

/// Column norms below this make a DoRA direction undefined.
pub const DORA_MIN_NORM: f64 = 1e-8;

/// Attention projection a LoRA attachment can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnWeight {
    Wq,
    Wk,
    Wv,
    Wo,
}

impl AttnWeight {
    pub const ALL: [AttnWeight; 4] = [AttnWeight::Wq, AttnWeight::Wk, AttnWeight::Wv, AttnWeight::Wo];

    pub fn name(self) -> &'static str {
        match self {
            AttnWeight::Wq => "wq",
            AttnWeight::Wk => "wk",
            AttnWeight::Wv => "wv",
            AttnWeight::Wo => "wo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TargetId {
    pub block: usize,
    pub weight: AttnWeight,
}

impl fmt::Display for TargetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.weight.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    Lora,
    Dora,
}

#[derive(Clone, Debug)]
pub struct LoraAttachment {
    pub target: TargetId,
    /// `r × d_model`, shared by every node and the server.
    pub a_fixed: Matrix,
    /// `d_model × r`.
    pub b: Param,
    pub mode: AdaptMode,
    /// Per-column magnitude (`1 × d_model`), DoRA only.
    pub m: Option<Param>,
}

/// Deterministic Gaussian `A` for one target, `N(0, 1/d_model)`.
pub fn generate_a_fixed(seed: u64, target: TargetId, rank: usize, d_model: usize) -> Matrix {
    let mut rng = SeededRng::derived(
        seed,
        &[label("a_fixed"), target.block as u64, label(target.weight.name())],
    );
    rng.gaussian_matrix(rank, d_model, 1.0 / (d_model as f64).sqrt())
}

/// Content hash of a set of frozen `A` matrices, in the given order.
pub fn a_fixed_hash<'a>(mats: impl IntoIterator<Item = &'a Matrix>) -> u64 {
    let mut h = Sha256::new();
    for m in mats {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for x in m.data() {
            h.update(x.to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

impl LoraAttachment {
    /// Fresh attachment with `b = 0`; in DoRA mode `m` starts at the column
    /// norms of `theta_w` so the effective weight equals `theta_w`.
    pub fn new(target: TargetId, theta_w: &Matrix, a_fixed: Matrix, mode: AdaptMode) -> Result<Self> {
        let d = theta_w.rows();
        if theta_w.cols() != a_fixed.cols() || a_fixed.rows() == 0 {
            return Err(Error::Dimension {
                op: "LoraAttachment::new",
                left: theta_w.shape(),
                right: a_fixed.shape(),
            });
        }
        let b = Param::trainable(Matrix::zeros(d, a_fixed.rows()));
        let m = match mode {
            AdaptMode::Lora => None,
            AdaptMode::Dora => {
                let norms = column_norms(theta_w);
                Some(Param::trainable(Matrix::row_vector(&norms)?))
            }
        };
        Ok(Self {
            target,
            a_fixed,
            b,
            mode,
            m,
        })
    }

    pub fn rank(&self) -> usize {
        self.a_fixed.rows()
    }

    /// `theta_w + b · a_fixed`.
    pub fn merged(&self, theta_w: &Matrix) -> Result<Matrix> {
        theta_w.add(&matmul(&self.b.value, &self.a_fixed)?)
    }
}

/// Scales column `j` of `w` to unit norm and then by `m[j]`.
pub fn dora_compose(w: &Matrix, m: &[f64], context: &str) -> Result<Matrix> {
    if m.len() != w.cols() {
        return Err(Error::Dimension {
            op: "dora_compose",
            left: w.shape(),
            right: (1, m.len()),
        });
    }
    let norms = column_norms(w);
    if let Some((column, &norm)) = norms.iter().enumerate().find(|(_, &n)| n < DORA_MIN_NORM) {
        return Err(Error::DegenerateDirection {
            context: context.to_string(),
            column,
            norm,
        });
    }
    let mut out = w.clone();
    let cols = w.cols();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        let j = i % cols;
        *x = m[j] * (*x / norms[j]);
    }
    Ok(out)
}

/// Effective weight seen by the forward pass.
///
/// LoRA: `theta_w + b·a`. DoRA: `m ⊙ (theta_w + b·a) / ‖theta_w + b·a‖_c`.
pub fn effective_weight(theta_w: &Matrix, att: &LoraAttachment) -> Result<Matrix> {
    let merged = att.merged(theta_w)?;
    match att.mode {
        AdaptMode::Lora => Ok(merged),
        AdaptMode::Dora => {
            let m = att
                .m
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{}: dora attachment without m", att.target)))?;
            dora_compose(&merged, m.value.data(), &att.target.to_string())
        }
    }
}
