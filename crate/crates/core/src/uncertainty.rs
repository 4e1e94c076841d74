//! Latent anchor-proximity (LAP) uncertainty and precision weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, Matrix};

pub const DEFAULT_U_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `p_k ∝ mean_i 1/u_i`.
    #[default]
    MeanInvU,
    /// `p_k ∝ Σ_i 1/u_i` over the node's `N_k` samples.
    SumInvU,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintySummary {
    pub node_id: usize,
    pub mean_u: f64,
    pub mean_inv_u: f64,
    /// Local dataset size `N_k`.
    pub n_samples: u64,
    /// Fraction of evaluated samples whose `u` was raised to `u_min`.
    pub clamped_fraction: f64,
}

/// Per-node aggregation weights, ordered by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeWeights {
    pub weights: Vec<(usize, f64)>,
    pub normalizer: f64,
}

impl NodeWeights {
    pub fn uniform(node_ids: &[usize]) -> Result<Self> {
        if node_ids.is_empty() {
            return Err(Error::Protocol("weights over zero nodes".into()));
        }
        let mut ids = node_ids.to_vec();
        ids.sort_unstable();
        let k = ids.len() as f64;
        Ok(Self {
            weights: ids.into_iter().map(|id| (id, 1.0 / k)).collect(),
            normalizer: k,
        })
    }

    pub fn get(&self, node_id: usize) -> Option<f64> {
        self.weights.iter().find(|(id, _)| *id == node_id).map(|&(_, w)| w)
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().map(|(_, w)| w).sum()
    }
}

/// `(1 − max_j cos(z, a_j)) / 2` over the anchor embeddings.
pub fn lap_u(z: &[f64], anchors: &[&[f64]]) -> Result<f64> {
    if anchors.is_empty() {
        return Err(Error::Protocol("LAP uncertainty needs at least one anchor".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for a in anchors {
        best = best.max(cosine(z, a)?);
    }
    Ok(((1.0 - best) / 2.0).clamp(0.0, 1.0))
}

/// LAP value of every row of `samples` against the rows of `anchors`.
pub fn lap_batch(samples: &Matrix, anchors: &Matrix) -> Result<Vec<f64>> {
    let rows: Vec<&[f64]> = (0..anchors.rows()).map(|j| anchors.row(j)).collect();
    (0..samples.rows()).map(|i| lap_u(samples.row(i), &rows)).collect()
}

/// Summarizes LAP values of a node's (sub)sampled data.
///
/// `n_samples` is the full local dataset size, which may exceed `u.len()`
/// when LAP ran on a subsample.
pub fn summarize(node_id: usize, u: &[f64], n_samples: u64, u_min: f64) -> Result<UncertaintySummary> {
    if u.is_empty() {
        return Err(Error::EmptySequence("uncertainty summary over zero samples"));
    }
    if !(u_min > 0.0 && u_min <= 1.0) {
        return Err(Error::Config(format!("u_min must be in (0, 1], got {u_min}")));
    }
    let n = u.len() as f64;
    let mean_u = u.iter().sum::<f64>() / n;
    let clamped = u.iter().filter(|&&x| x < u_min).count();
    let mean_inv_u = u.iter().map(|&x| 1.0 / x.max(u_min)).sum::<f64>() / n;
    Ok(UncertaintySummary {
        node_id,
        mean_u,
        mean_inv_u,
        n_samples,
        clamped_fraction: clamped as f64 / n,
    })
}

/// LAP summary of a node from its sample and anchor embeddings.
pub fn node_summary(
    node_id: usize,
    sample_embeddings: &Matrix,
    anchor_embeddings: &Matrix,
    n_samples: u64,
    u_min: f64,
) -> Result<UncertaintySummary> {
    let u = lap_batch(sample_embeddings, anchor_embeddings)?;
    summarize(node_id, &u, n_samples, u_min)
}

/// Normalized precision weights, summed in node-id order.
pub fn precision_weights(summaries: &[UncertaintySummary], mode: WeightMode) -> Result<NodeWeights> {
    if summaries.is_empty() {
        return Err(Error::Protocol("precision weights over zero nodes".into()));
    }
    let mut sorted = summaries.to_vec();
    sorted.sort_by_key(|s| s.node_id);
    let raw: Vec<(usize, f64)> = sorted
        .iter()
        .map(|s| {
            let v = match mode {
                WeightMode::MeanInvU => s.mean_inv_u,
                WeightMode::SumInvU => s.mean_inv_u * s.n_samples as f64,
            };
            (s.node_id, v)
        })
        .collect();
    if let Some((id, v)) = raw.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Protocol(format!(
            "node {id} has invalid inverse uncertainty {v}"
        )));
    }
    let normalizer: f64 = raw.iter().map(|(_, v)| v).sum();
    // 1 / Σ_j (v_j / v_k): equal summaries give exactly 1/K, the uniform weight.
    let weights = raw
        .iter()
        .map(|&(id, vk)| (id, 1.0 / raw.iter().map(|(_, vj)| vj / vk).sum::<f64>()))
        .collect();
    Ok(NodeWeights { weights, normalizer })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(node_id: usize, mean_inv_u: f64) -> UncertaintySummary {
        UncertaintySummary {
            node_id,
            mean_u: 0.1,
            mean_inv_u,
            n_samples: 10,
            clamped_fraction: 0.0,
        }
    }

    #[test]
    fn lap_examples() {
        let a = [1.0, 2.0, -1.0];
        assert_eq!(lap_u(&a, &[&a]).unwrap(), 0.0);
        assert_eq!(
            lap_u(&[0.0, 0.0, 1.0], &[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]]).unwrap(),
            0.5
        );
        assert_eq!(lap_u(&[-1.0, -2.0, 1.0], &[&a]).unwrap(), 1.0);
        assert!(matches!(lap_u(&a, &[]), Err(Error::Protocol(_))));
        assert!(matches!(lap_u(&[0.0; 3], &[&a]), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn summary_examples() {
        let s = summarize(0, &[0.0, 0.0, 0.0], 3, 1e-3).unwrap();
        assert!((s.mean_inv_u - 1000.0).abs() < 1e-9);
        assert_eq!(s.clamped_fraction, 1.0);
        let s = summarize(0, &[0.5; 4], 4, 1e-3).unwrap();
        assert_eq!(s.mean_inv_u, 2.0);
        let s = summarize(0, &[0.1, 0.2], 2, 1e-3).unwrap();
        assert!((s.mean_inv_u - 7.5).abs() < 1e-12);
        assert!((s.mean_u - 0.15).abs() < 1e-15);
        assert!(summarize(0, &[], 0, 1e-3).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = precision_weights(
            &[summary(0, 4.0), summary(1, 4.0), summary(2, 4.0)],
            WeightMode::MeanInvU,
        )
        .unwrap();
        for (_, p) in &w.weights {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = precision_weights(&[summary(1, 5.0), summary(0, 10.0)], WeightMode::MeanInvU).unwrap();
        assert_eq!(w.weights[0].0, 0);
        assert!((w.get(0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.get(1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let w = precision_weights(&[summary(7, 3.0)], WeightMode::MeanInvU).unwrap();
        assert_eq!(w.weights, vec![(7, 1.0)]);
        assert!(precision_weights(&[], WeightMode::MeanInvU).is_err());
    }

    #[test]
    fn sum_mode_scales_by_dataset_size() {
        let mut a = summary(0, 2.0);
        a.n_samples = 30;
        let b = summary(1, 2.0);
        let w = precision_weights(&[a, b], WeightMode::SumInvU).unwrap();
        assert!((w.get(0).unwrap() - 0.75).abs() < 1e-15);
    }
}
