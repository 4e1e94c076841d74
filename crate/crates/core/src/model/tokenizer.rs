use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{label, SeededRng};
use crate::numerics::{matmul, Matrix, Param};

/// Data modality held by a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Genetics,
    Tabular,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Image, Modality::Text, Modality::Genetics, Modality::Tabular];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Genetics => "genetics",
            Modality::Tabular => "tabular",
        }
    }

    /// Default token width of the frozen tokenizer for this modality.
    pub fn default_token_dim(self) -> usize {
        match self {
            Modality::Image => 24,
            Modality::Text => 16,
            Modality::Genetics => 12,
            Modality::Tabular => 8,
        }
    }

    pub fn tag(self) -> u64 {
        label(self.name())
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub modality: Modality,
    pub token_dim: usize,
    pub seq_len: usize,
}

impl ModalitySpec {
    pub fn new(modality: Modality, token_dim: usize, seq_len: usize) -> Result<Self> {
        if token_dim == 0 || seq_len == 0 {
            return Err(Error::Config(format!(
                "modality {modality}: token_dim and seq_len must be >= 1"
            )));
        }
        Ok(Self {
            modality,
            token_dim,
            seq_len,
        })
    }

    pub fn with_defaults(modality: Modality, seq_len: usize) -> Result<Self> {
        Self::new(modality, modality.default_token_dim(), seq_len)
    }
}

/// Frozen random-projection tokenizer: each of the `seq_len` slices of a raw
/// sample is projected to `token_dim` by the same fixed matrix.
#[derive(Clone, Debug)]
pub struct TokenizerStub {
    pub spec: ModalitySpec,
    pub raw_dim: usize,
    pub proj: Matrix,
    pub seed: u64,
}

impl TokenizerStub {
    pub fn new(spec: ModalitySpec, raw_dim: usize, seed: u64) -> Result<Self> {
        if raw_dim == 0 {
            return Err(Error::Config("tokenizer raw_dim must be >= 1".into()));
        }
        let mut rng = SeededRng::derived(seed, &[label("tokenizer"), spec.modality.tag()]);
        let proj = rng.gaussian_matrix(raw_dim, spec.token_dim, 1.0 / (raw_dim as f64).sqrt());
        Ok(Self {
            spec,
            raw_dim,
            proj,
            seed,
        })
    }

    /// Length of one raw sample vector.
    pub fn sample_len(&self) -> usize {
        self.raw_dim * self.spec.seq_len
    }

    /// Maps one raw sample to an `L × token_dim` token matrix.
    pub fn tokenize(&self, x: &[f64]) -> Result<Matrix> {
        self.tokenize_batch(&[x])
    }

    /// Tokenizes several samples, stacking their token rows.
    pub fn tokenize_batch<S: AsRef<[f64]>>(&self, xs: &[S]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(xs.len() * self.sample_len());
        for x in xs {
            let x = x.as_ref();
            if x.len() != self.sample_len() {
                return Err(Error::Dimension {
                    op: "tokenize",
                    left: (1, x.len()),
                    right: (self.spec.seq_len, self.raw_dim),
                });
            }
            data.extend_from_slice(x);
        }
        let slices = Matrix::new(xs.len() * self.spec.seq_len, self.raw_dim, data)?;
        matmul(&slices, &self.proj)
    }
}

/// Node-local linear map from token width to the model width.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub w: Param,
}

impl Adapter {
    pub fn new(token_dim: usize, d_model: usize, rng: &mut SeededRng) -> Self {
        let w = rng.gaussian_matrix(token_dim, d_model, 1.0 / (token_dim as f64).sqrt());
        Self { w: Param::trainable(w) }
    }

    pub fn from_matrix(w: Matrix) -> Self {
        Self { w: Param::trainable(w) }
    }

    pub fn adapt(&self, tokens: &Matrix) -> Result<Matrix> {
        matmul(tokens, &self.w.value)
    }
}
