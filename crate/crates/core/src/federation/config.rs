//! Experiment configuration (TOML, unknown keys rejected).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdaptMode, Modality, TransformerConfig};
use crate::numerics::rng::{derive_seed, label};
use crate::synthdata::{AnchorSetSpec, Corruption};
use crate::uncertainty::{WeightMode, DEFAULT_U_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Dense averaging of every transformer weight; no attachments.
    FedavgFull,
    /// Frozen-A LoRA: average `b`, keep `θ` and `A` fixed.
    Geolora,
    /// Frozen-A DoRA: average `b` and magnitudes, renormalize directions.
    Geodora,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::FedavgFull => "fedavg_full",
            Aggregation::Geolora => "geolora",
            Aggregation::Geodora => "geodora",
        }
    }

    pub fn adapt_mode(self) -> Option<AdaptMode> {
        match self {
            Aggregation::FedavgFull => None,
            Aggregation::Geolora => Some(AdaptMode::Lora),
            Aggregation::Geodora => Some(AdaptMode::Dora),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Aggregation::FedavgFull => 0,
            Aggregation::Geolora => 1,
            Aggregation::Geodora => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Aggregation::FedavgFull),
            1 => Ok(Aggregation::Geolora),
            2 => Ok(Aggregation::Geodora),
            other => Err(Error::Decode(format!("unknown aggregation code {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub modality: Modality,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub corruption: Corruption,
    /// Overrides the seed derived from the global seed and node index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl NodeConfig {
    pub fn new(modality: Modality) -> Self {
        Self {
            modality,
            samples: default_samples(),
            corruption: Corruption::None,
            seed: None,
        }
    }

    pub fn with_corruption(mut self, corruption: Corruption) -> Self {
        self.corruption = corruption;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub latent_dim: usize,
    pub noise_sigma: f64,
    /// Width of each raw token slice before the tokenizer projection.
    pub raw_dim: usize,
    /// Held-out samples per node, drawn with the node's corruption.
    pub test_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            noise_sigma: 0.3,
            raw_dim: 16,
            test_samples: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub seed: u64,
    pub rounds: usize,
    pub lambda: f64,
    pub aggregation: Aggregation,
    pub weighting: Weighting,
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(default = "default_u_min")]
    pub u_min: f64,
    #[serde(default)]
    pub center_kernels: bool,
    /// LAP runs on at most this many local samples per round.
    #[serde(default = "default_lap_subsample")]
    pub lap_subsample: usize,
    /// Run node rounds on a thread pool. Results are identical either way.
    #[serde(default = "default_true")]
    pub parallel: bool,
    /// Report communication costs analytically and skip training.
    #[serde(default)]
    pub analytic_only: bool,
    #[serde(default)]
    pub model: TransformerConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub anchors: AnchorSetSpec,
    pub nodes: Vec<NodeConfig>,
}

fn default_samples() -> usize {
    512
}
fn default_local_steps() -> usize {
    10
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_batch_size() -> usize {
    32
}
fn default_u_min() -> f64 {
    DEFAULT_U_MIN
}
fn default_lap_subsample() -> usize {
    256
}
fn default_true() -> bool {
    true
}

impl FederationConfig {
    /// Default hyperparameters around the given nodes.
    pub fn new(nodes: Vec<NodeConfig>, aggregation: Aggregation, lambda: f64) -> Self {
        Self {
            seed: 0,
            rounds: 10,
            lambda,
            aggregation,
            weighting: Weighting::Uniform,
            local_steps: default_local_steps(),
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            weight_mode: WeightMode::default(),
            u_min: DEFAULT_U_MIN,
            center_kernels: false,
            lap_subsample: default_lap_subsample(),
            parallel: true,
            analytic_only: false,
            model: TransformerConfig::default(),
            data: DataConfig::default(),
            anchors: AnchorSetSpec::default(),
            nodes,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn k(&self) -> usize {
        self.nodes.len()
    }

    /// Anchors per modality.
    pub fn anchor_count(&self) -> usize {
        self.anchors.anchors_per_concept * self.model.n_classes
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, &[label("model")])
    }

    pub fn node_seed(&self, node: usize) -> u64 {
        self.nodes[node]
            .seed
            .unwrap_or_else(|| derive_seed(self.seed, &[label("node"), node as u64]))
    }

    /// Full validation, including `rounds >= 1`.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        self.validate_setup()
    }

    /// Everything except the round count; `run_federation` accepts zero rounds.
    pub fn validate_setup(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.nodes.is_empty() {
            return err("nodes: at least one node is required".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.local_steps == 0 || self.batch_size == 0 || self.lap_subsample == 0 {
            return err("local_steps, batch_size and lap_subsample must be >= 1".into());
        }
        if !(self.u_min > 0.0 && self.u_min <= 1.0) {
            return err(format!("u_min must be in (0, 1], got {}", self.u_min));
        }
        self.model.validate()?;
        if self.data.latent_dim == 0 || self.data.raw_dim == 0 || self.data.test_samples == 0 {
            return err("data.latent_dim, data.raw_dim and data.test_samples must be >= 1".into());
        }
        if !(self.data.noise_sigma >= 0.0 && self.data.noise_sigma.is_finite()) {
            return err(format!("data.noise_sigma must be >= 0, got {}", self.data.noise_sigma));
        }
        if self.anchors.anchors_per_concept == 0 || self.anchor_count() < 2 {
            return err("anchors: need at least 2 anchors per modality".into());
        }
        for s in &self.anchors.synthetic {
            if !(s.delta >= 0.0 && s.delta.is_finite()) {
                return err(format!("anchors.synthetic: delta for {} must be >= 0", s.modality));
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.samples == 0 {
                return err(format!("nodes[{i}].samples must be >= 1"));
            }
            n.corruption
                .validate()
                .map_err(|e| Error::Config(format!("nodes[{i}].corruption: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 1
rounds = 2
lambda = 1.0
aggregation = "geolora"
weighting = "uniform"

[[nodes]]
modality = "image"

[[nodes]]
modality = "text"
corruption = { kind = "label_noise", rate = 0.2 }
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = FederationConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.k(), 2);
        assert_eq!(cfg.local_steps, 10);
        assert_eq!(cfg.learning_rate, 0.05);
        assert_eq!(cfg.model, TransformerConfig::default());
        assert_eq!(cfg.nodes[1].corruption, Corruption::LabelNoise { rate: 0.2 });
        assert_eq!(cfg.anchor_count(), 16);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = FederationConfig::from_toml(MINIMAL).unwrap();
        let again = FederationConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn missing_lambda_names_the_field() {
        let text = MINIMAL.replace("lambda = 1.0\n", "");
        let e = FederationConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("lambda"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("lambda = 1.0", "lambda = 1.0\nlamda = 2.0");
        let e = FederationConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("lamda"), "{e}");
        let text = format!("{MINIMAL}\n[model]\nrank = 3\n");
        assert!(FederationConfig::from_toml(&text).is_err());
    }

    #[test]
    fn invariants_are_checked() {
        for (from, to) in [
            ("lambda = 1.0", "lambda = -1.0"),
            ("rounds = 2", "rounds = 0"),
            ("seed = 1", "seed = 1\nlearning_rate = 0.0"),
            ("rate = 0.2", "rate = 1.5"),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(FederationConfig::from_toml(&text).is_err(), "{to}");
        }
        let mut cfg = FederationConfig::from_toml(MINIMAL).unwrap();
        cfg.nodes.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn node_seeds_are_distinct_and_overridable() {
        let mut cfg = FederationConfig::from_toml(MINIMAL).unwrap();
        assert_ne!(cfg.node_seed(0), cfg.node_seed(1));
        cfg.nodes[1].seed = Some(7);
        assert_eq!(cfg.node_seed(1), 7);
    }
}
