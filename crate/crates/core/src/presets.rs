//! Named experiment scenarios, each a small set of comparable configs.

use crate::error::{Error, Result};
use crate::federation::{Aggregation, FederationConfig, NodeConfig, Weighting};
use crate::model::Modality;
use crate::synthdata::Corruption;

pub const PRESET_NAMES: [&str; 4] = ["align_ablation", "precision_vs_uniform", "dora_vs_lora", "comm_audit"];

#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    /// `(label, config)` pairs; configs in a preset differ only in the knob under study.
    pub configs: Vec<(String, FederationConfig)>,
}

impl Preset {
    pub fn config(&self, label: &str) -> Option<&FederationConfig> {
        self.configs.iter().find(|(l, _)| l == label).map(|(_, c)| c)
    }

    /// Same preset with every config reseeded.
    pub fn with_seed(mut self, seed: u64) -> Self {
        for (_, c) in &mut self.configs {
            c.seed = seed;
        }
        self
    }
}

fn two_modalities() -> Vec<NodeConfig> {
    vec![
        NodeConfig::new(Modality::Image),
        NodeConfig::new(Modality::Image),
        NodeConfig::new(Modality::Text),
        NodeConfig::new(Modality::Text),
    ]
}

pub fn preset(name: &str) -> Result<Preset> {
    let configs = match name {
        "align_ablation" => {
            let mut on = FederationConfig::new(two_modalities(), Aggregation::Geolora, 1.0);
            on.rounds = 30;
            let mut off = on.clone();
            off.lambda = 0.0;
            vec![("lambda1".to_string(), on), ("lambda0".to_string(), off)]
        }
        "precision_vs_uniform" => {
            let mut nodes = two_modalities();
            nodes[3] = NodeConfig::new(Modality::Text).with_corruption(Corruption::PureNoise);
            let mut precision = FederationConfig::new(nodes, Aggregation::Geolora, 1.0);
            precision.rounds = 20;
            precision.weighting = Weighting::Precision;
            let mut uniform = precision.clone();
            uniform.weighting = Weighting::Uniform;
            vec![("precision".to_string(), precision), ("uniform".to_string(), uniform)]
        }
        "dora_vs_lora" => {
            let mut lora = FederationConfig::new(two_modalities(), Aggregation::Geolora, 1.0);
            lora.rounds = 20;
            let mut dora = lora.clone();
            dora.aggregation = Aggregation::Geodora;
            vec![("geolora".to_string(), lora), ("geodora".to_string(), dora)]
        }
        "comm_audit" => {
            let nodes = vec![NodeConfig::new(Modality::Image), NodeConfig::new(Modality::Text)];
            let mut analytic = FederationConfig::new(nodes.clone(), Aggregation::Geolora, 1.0);
            analytic.analytic_only = true;
            analytic.rounds = 1;
            analytic.model.d_model = 4096;
            analytic.model.n_heads = 32;
            analytic.model.mlp_hidden = 16384;
            analytic.model.lora_rank = 4;
            let mut toy = FederationConfig::new(nodes, Aggregation::Geolora, 1.0);
            toy.rounds = 3;
            toy.local_steps = 2;
            let mut full = toy.clone();
            full.aggregation = Aggregation::FedavgFull;
            vec![
                ("analytic_d4096".to_string(), analytic),
                ("toy_geolora".to_string(), toy),
                ("toy_fedavg_full".to_string(), full),
            ]
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; valid presets: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    let name = PRESET_NAMES.iter().find(|n| **n == name).expect("matched above");
    Ok(Preset { name, configs })
}
