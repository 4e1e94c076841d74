//! Unpaired multimodal data from a shared latent concept space.
//!
//! Every modality observes the same concepts through its own fixed nonlinear
//! map (`latent → tanh(latent·M1) → ·M2`), sliced into `seq_len` token
//! slices of width `raw_dim`. Nodes and anchor sets draw independent latents,
//! so no sample is ever shared or paired across modalities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AnchorSet;
use crate::model::{Modality, ModalitySpec};
use crate::numerics::rng::{label, SeededRng};
use crate::numerics::{matmul, norm, Matrix};
use crate::tensorio::NamedTensor;

const MAX_REDRAWS: usize = 100;
const MAP_HIDDEN: usize = 32;
const MAP_GAIN: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct ConceptSpace {
    pub n_concepts: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    /// `n_concepts × latent_dim`, unit-norm rows.
    pub means: Matrix,
    pub seed: u64,
}

pub fn gen_concepts(n_concepts: usize, latent_dim: usize, noise_sigma: f64, seed: u64) -> Result<ConceptSpace> {
    if n_concepts < 2 {
        return Err(Error::Config("n_concepts must be >= 2".into()));
    }
    if latent_dim == 0 || noise_sigma.is_nan() || noise_sigma < 0.0 {
        return Err(Error::Config("latent_dim must be >= 1 and noise_sigma >= 0".into()));
    }
    let mut rng = SeededRng::derived(seed, &[label("concepts")]);
    for _ in 0..MAX_REDRAWS {
        let mut rows = Vec::with_capacity(n_concepts);
        for _ in 0..n_concepts {
            let v = rng.gaussian_vec(latent_dim, 1.0);
            let n = norm(&v);
            if n == 0.0 {
                continue;
            }
            rows.push(v.into_iter().map(|x| x / n).collect::<Vec<_>>());
        }
        if rows.len() == n_concepts && min_pairwise_distance(&rows) > 2.0 * noise_sigma {
            return Ok(ConceptSpace {
                n_concepts,
                latent_dim,
                noise_sigma,
                means: Matrix::from_rows(&rows)?,
                seed,
            });
        }
    }
    Err(Error::Config(format!(
        "could not separate {n_concepts} concepts in {latent_dim} dims by more than 2σ = {} after {MAX_REDRAWS} draws",
        2.0 * noise_sigma
    )))
}

fn min_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

impl ConceptSpace {
    pub fn min_separation(&self) -> f64 {
        let rows: Vec<Vec<f64>> = (0..self.n_concepts).map(|i| self.means.row(i).to_vec()).collect();
        min_pairwise_distance(&rows)
    }

    fn draw_latent(&self, rng: &mut SeededRng, concept: usize, offset: Option<&[f64]>) -> Vec<f64> {
        let mean = self.means.row(concept);
        (0..self.latent_dim)
            .map(|i| {
                let shift = offset.map_or(0.0, |o| o[i]);
                mean[i] + shift + self.noise_sigma * rng.gaussian()
            })
            .collect()
    }
}

/// Fixed observation map of one modality.
#[derive(Clone, Debug)]
pub struct ModalityMap {
    pub modality: Modality,
    hidden: Matrix,
    out: Matrix,
}

impl ModalityMap {
    pub fn new(space: &ConceptSpace, modality: Modality, sample_len: usize) -> Self {
        let mut rng = SeededRng::derived(space.seed, &[label("modality_map"), modality.tag()]);
        let hidden = rng.gaussian_matrix(
            space.latent_dim,
            MAP_HIDDEN,
            MAP_GAIN / (space.latent_dim as f64).sqrt(),
        );
        let out = rng.gaussian_matrix(MAP_HIDDEN, sample_len, 1.0 / (MAP_HIDDEN as f64).sqrt());
        Self { modality, hidden, out }
    }

    pub fn apply(&self, latent: &[f64]) -> Result<Vec<f64>> {
        let l = Matrix::row_vector(latent)?;
        let h = matmul(&l, &self.hidden)?.map(f64::tanh);
        Ok(matmul(&h, &self.out)?.into_data())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Corruption {
    #[default]
    None,
    /// Each label is replaced by a different concept with probability `rate`.
    LabelNoise { rate: f64 },
    /// A fixed per-node Gaussian offset with per-entry std `sigma` added to every sample.
    EmbeddingShift { sigma: f64 },
    /// Samples are standard normal noise; labels are uniform and independent.
    PureNoise,
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Corruption::LabelNoise { rate } if !(0.0..=1.0).contains(&rate) => {
                Err(Error::Config(format!("label_noise rate {rate} outside [0, 1]")))
            }
            Corruption::EmbeddingShift { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("embedding_shift sigma {sigma} must be >= 0")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeDataset {
    pub node_id: usize,
    pub modality: ModalitySpec,
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub corruption: Corruption,
}

impl NodeDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Draws `n` samples of `spec.modality`. `seed` should already be specific to
/// the node; independent seeds give independent latent draws.
pub fn gen_node_dataset(
    space: &ConceptSpace,
    spec: &ModalitySpec,
    raw_dim: usize,
    node_id: usize,
    n: usize,
    corruption: Corruption,
    seed: u64,
) -> Result<NodeDataset> {
    corruption.validate()?;
    if raw_dim == 0 {
        return Err(Error::Config("raw_dim must be >= 1".into()));
    }
    let sample_len = raw_dim * spec.seq_len;
    let map = ModalityMap::new(space, spec.modality, sample_len);
    let mut rng = SeededRng::derived(seed, &[label("node_data"), node_id as u64]);
    let mut flip_rng = SeededRng::derived(seed, &[label("label_noise"), node_id as u64]);
    let shift = match corruption {
        Corruption::EmbeddingShift { sigma } => Some(rng.gaussian_vec(sample_len, sigma)),
        _ => None,
    };
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let concept = rng.below(space.n_concepts);
        let (sample, label) = match corruption {
            Corruption::PureNoise => (rng.gaussian_vec(sample_len, 1.0), concept),
            _ => {
                let latent = space.draw_latent(&mut rng, concept, None);
                let mut raw = map.apply(&latent)?;
                if let Some(s) = &shift {
                    raw.iter_mut().zip(s).for_each(|(x, d)| *x += d);
                }
                let label = match corruption {
                    Corruption::LabelNoise { rate } if flip_rng.uniform() < rate => {
                        (concept + 1 + flip_rng.below(space.n_concepts - 1)) % space.n_concepts
                    }
                    _ => concept,
                };
                (raw, label)
            }
        };
        samples.push(sample);
        labels.push(label);
    }
    Ok(NodeDataset {
        node_id,
        modality: *spec,
        samples,
        labels,
        corruption,
    })
}

/// Samples as `node{id}.samples` (`N × sample_len`) and labels as
/// `node{id}.labels` (rank 1, stored as f64).
pub fn dataset_tensors(ds: &NodeDataset) -> Result<Vec<NamedTensor>> {
    let samples = Matrix::from_rows(&ds.samples)?;
    let labels: Vec<f64> = ds.labels.iter().map(|&l| l as f64).collect();
    Ok(vec![
        NamedTensor::from_matrix(format!("node{}.samples", ds.node_id), &samples),
        NamedTensor::from_vec(format!("node{}.labels", ds.node_id), &labels),
    ])
}

/// Anchors as `anchors.{modality}.samples` and `anchors.{modality}.concepts`.
pub fn anchor_tensors(set: &AnchorSet) -> Result<Vec<NamedTensor>> {
    let samples = Matrix::from_rows(&set.samples)?;
    let concepts: Vec<f64> = set.concepts.iter().map(|&c| c as f64).collect();
    Ok(vec![
        NamedTensor::from_matrix(format!("anchors.{}.samples", set.modality), &samples),
        NamedTensor::from_vec(format!("anchors.{}.concepts", set.modality), &concepts),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticAnchor {
    pub modality: Modality,
    /// Norm of the shift applied to every concept mean.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSetSpec {
    pub anchors_per_concept: usize,
    /// Modalities with real public anchors. Empty means "every federation modality".
    #[serde(default)]
    pub real: Vec<Modality>,
    #[serde(default)]
    pub synthetic: Vec<SyntheticAnchor>,
}

impl Default for AnchorSetSpec {
    fn default() -> Self {
        Self {
            anchors_per_concept: 2,
            real: Vec::new(),
            synthetic: Vec::new(),
        }
    }
}

impl AnchorSetSpec {
    fn synthetic_delta(&self, m: Modality) -> Option<f64> {
        self.synthetic.iter().find(|s| s.modality == m).map(|s| s.delta)
    }

    fn covers(&self, m: Modality) -> bool {
        self.real.is_empty() || self.real.contains(&m) || self.synthetic_delta(m).is_some()
    }
}

/// Public anchors for each requested modality, concept-major order
/// (index `c · anchors_per_concept + j`).
pub fn gen_anchor_set(
    space: &ConceptSpace,
    spec: &AnchorSetSpec,
    modalities: &[ModalitySpec],
    raw_dim: usize,
    seed: u64,
) -> Result<BTreeMap<Modality, AnchorSet>> {
    if spec.anchors_per_concept == 0 {
        return Err(Error::Config("anchors.anchors_per_concept must be >= 1".into()));
    }
    let mut out = BTreeMap::new();
    for ms in modalities {
        let m = ms.modality;
        if out.contains_key(&m) {
            continue;
        }
        if !spec.covers(m) {
            return Err(Error::Config(format!(
                "modality {m} has no public anchors and no synthetic anchor entry"
            )));
        }
        let synthetic = if spec.real.is_empty() || spec.real.contains(&m) {
            None
        } else {
            spec.synthetic_delta(m)
        };
        let sample_len = raw_dim * ms.seq_len;
        let map = ModalityMap::new(space, m, sample_len);
        let mut rng = SeededRng::derived(seed, &[label("anchors"), m.tag()]);
        let offset = synthetic.map(|delta| {
            let mut orng = SeededRng::derived(seed, &[label("synthetic_offset"), m.tag()]);
            let v = orng.gaussian_vec(space.latent_dim, 1.0);
            let n = norm(&v);
            v.into_iter().map(|x| delta * x / n).collect::<Vec<_>>()
        });
        let mut samples = Vec::new();
        let mut concepts = Vec::new();
        for c in 0..space.n_concepts {
            for _ in 0..spec.anchors_per_concept {
                let latent = space.draw_latent(&mut rng, c, offset.as_deref());
                samples.push(map.apply(&latent)?);
                concepts.push(c);
            }
        }
        out.insert(
            m,
            AnchorSet {
                modality: m,
                samples,
                concepts,
                synthetic: synthetic.is_some(),
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(m: Modality) -> ModalitySpec {
        ModalitySpec::with_defaults(m, 8).unwrap()
    }

    #[test]
    fn concept_examples() {
        let s = gen_concepts(2, 16, 0.3, 1).unwrap();
        assert_eq!(s.means.shape(), (2, 16));
        for i in 0..2 {
            assert!((norm(s.means.row(i)) - 1.0).abs() < 1e-12);
        }
        assert!(s.min_separation() > 0.6);
        assert!(s.means.bit_eq(&gen_concepts(2, 16, 0.3, 1).unwrap().means));
        assert!(matches!(gen_concepts(64, 2, 0.3, 1), Err(Error::Config(_))));
        assert!(gen_concepts(1, 4, 0.3, 1).is_err());
    }

    #[test]
    fn zero_noise_collapses_concepts() {
        let s = gen_concepts(4, 16, 0.0, 3).unwrap();
        let d = gen_node_dataset(&s, &spec(Modality::Image), 6, 0, 64, Corruption::None, 5).unwrap();
        let mut by_concept: BTreeMap<usize, &Vec<f64>> = BTreeMap::new();
        for (x, &y) in d.samples.iter().zip(&d.labels) {
            if let Some(first) = by_concept.get(&y) {
                assert_eq!(*first, x);
            } else {
                by_concept.insert(y, x);
            }
        }
    }

    #[test]
    fn different_seeds_are_disjoint() {
        let s = gen_concepts(8, 16, 0.3, 3).unwrap();
        let a = gen_node_dataset(&s, &spec(Modality::Text), 6, 0, 100, Corruption::None, 1).unwrap();
        let b = gen_node_dataset(&s, &spec(Modality::Text), 6, 1, 100, Corruption::None, 2).unwrap();
        for x in &a.samples {
            assert!(b.samples.iter().all(|y| y != x));
        }
    }

    #[test]
    fn label_noise_flips_to_other_concepts() {
        let s = gen_concepts(8, 16, 0.3, 3).unwrap();
        let clean = gen_node_dataset(&s, &spec(Modality::Text), 6, 0, 400, Corruption::None, 1).unwrap();
        let noisy = gen_node_dataset(
            &s,
            &spec(Modality::Text),
            6,
            0,
            400,
            Corruption::LabelNoise { rate: 1.0 },
            1,
        )
        .unwrap();
        // rate 1 flips every label; the latent stream is shared so samples match.
        assert_eq!(clean.samples, noisy.samples);
        assert!(clean.labels.iter().zip(&noisy.labels).all(|(a, b)| a != b));
        assert!(Corruption::LabelNoise { rate: 1.5 }.validate().is_err());
    }

    #[test]
    fn anchor_examples() {
        let s = gen_concepts(8, 16, 0.3, 3).unwrap();
        let mods = [spec(Modality::Image), spec(Modality::Text)];
        let a = gen_anchor_set(&s, &AnchorSetSpec::default(), &mods, 6, 11).unwrap();
        assert_eq!(a[&Modality::Image].len(), 16);
        assert_eq!(a[&Modality::Text].concepts[..4], [0, 0, 1, 1]);
        let again = gen_anchor_set(&s, &AnchorSetSpec::default(), &mods, 6, 11).unwrap();
        assert_eq!(a[&Modality::Image].samples, again[&Modality::Image].samples);
    }

    #[test]
    fn missing_modality_needs_synthetic_flag() {
        let s = gen_concepts(8, 16, 0.3, 3).unwrap();
        let mods = [spec(Modality::Image), spec(Modality::Genetics)];
        let only_image = AnchorSetSpec {
            anchors_per_concept: 1,
            real: vec![Modality::Image],
            synthetic: vec![],
        };
        assert!(matches!(
            gen_anchor_set(&s, &only_image, &mods, 6, 1),
            Err(Error::Config(_))
        ));
        let with_synth = AnchorSetSpec {
            synthetic: vec![SyntheticAnchor {
                modality: Modality::Genetics,
                delta: 0.5,
            }],
            ..only_image
        };
        let a = gen_anchor_set(&s, &with_synth, &mods, 6, 1).unwrap();
        assert!(a[&Modality::Genetics].synthetic);
        assert!(!a[&Modality::Image].synthetic);
    }
}
