mod common;

use common::median;
use geofed::federation::{Aggregation, Federation, FederationConfig, NodeConfig, TrainParams};
use geofed::model::{Modality, ModalitySpec, TokenizerStub};
use geofed::numerics::{Matrix, Param, Tape};
use geofed::synthdata::{
    anchor_tensors, dataset_tensors, gen_anchor_set, gen_concepts, gen_node_dataset, AnchorSetSpec, ConceptSpace,
    Corruption, NodeDataset, SyntheticAnchor,
};
use geofed::tensorio::{decode_checkpoint, encode_checkpoint};
use proptest::prelude::*;
use std::collections::HashSet;

const RAW_DIM: usize = 16;
const C: usize = 8;

fn space(seed: u64) -> ConceptSpace {
    gen_concepts(C, 16, 0.3, seed).unwrap()
}

fn spec(m: Modality) -> ModalitySpec {
    ModalitySpec::with_defaults(m, 8).unwrap()
}

fn dataset(space: &ConceptSpace, m: Modality, node: usize, n: usize, c: Corruption, seed: u64) -> NodeDataset {
    gen_node_dataset(space, &spec(m), RAW_DIM, node, n, c, seed).unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Plug-in mutual information (bits) between two discrete variables.
fn mutual_information(xs: &[usize], ys: &[usize], nx: usize, ny: usize) -> f64 {
    let n = xs.len() as f64;
    let mut joint = vec![0.0; nx * ny];
    let (mut px, mut py) = (vec![0.0; nx], vec![0.0; ny]);
    for (&x, &y) in xs.iter().zip(ys) {
        joint[x * ny + y] += 1.0 / n;
        px[x] += 1.0 / n;
        py[y] += 1.0 / n;
    }
    let mut mi = 0.0;
    for x in 0..nx {
        for y in 0..ny {
            let p = joint[x * ny + y];
            if p > 0.0 {
                mi += p * (p / (px[x] * py[y])).log2();
            }
        }
    }
    mi
}

/// MI between labels and the nearest class centroid, with centroids fitted
/// on an independent clean sample of the same modality.
fn label_information(space: &ConceptSpace, ds: &NodeDataset) -> f64 {
    let reference = dataset(space, ds.modality.modality, 99, 800, Corruption::None, 1234);
    let len = reference.samples[0].len();
    let mut centroids = vec![vec![0.0; len]; C];
    let mut counts = vec![0.0; C];
    for (x, &y) in reference.samples.iter().zip(&reference.labels) {
        centroids[y].iter_mut().zip(x).for_each(|(c, v)| *c += v);
        counts[y] += 1.0;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n);
    }
    let predicted: Vec<usize> = ds
        .samples
        .iter()
        .map(|x| {
            (0..C)
                .min_by(|&a, &b| sq_dist(x, &centroids[a]).total_cmp(&sq_dist(x, &centroids[b])))
                .unwrap()
        })
        .collect();
    mutual_information(&ds.labels, &predicted, C, C)
}

#[test]
fn pure_noise_labels_carry_no_information() {
    let s = space(1);
    let noisy = dataset(&s, Modality::Image, 0, 1000, Corruption::PureNoise, 5);
    let clean = dataset(&s, Modality::Image, 0, 1000, Corruption::None, 5);
    let mi_noise = label_information(&s, &noisy);
    let mi_clean = label_information(&s, &clean);
    // Plug-in bias for an 8×8 table at n = 1000 is about 0.035 bits.
    assert!(mi_noise < 0.1, "pure noise MI {mi_noise}");
    assert!(mi_clean > 1.0, "clean MI {mi_clean}");
}

fn probe_features(stub: &TokenizerStub, ds: &NodeDataset) -> Matrix {
    let rows: Vec<Vec<f64>> = ds
        .samples
        .iter()
        .map(|x| stub.tokenize(x).unwrap().into_data())
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

#[test]
fn linear_probe_on_random_tokens_beats_chance() {
    let s = space(2);
    for m in Modality::ALL {
        let stub = TokenizerStub::new(spec(m), RAW_DIM, 77).unwrap();
        let train = dataset(&s, m, 0, 512, Corruption::None, 3);
        let test = dataset(&s, m, 0, 256, Corruption::None, 4);
        let (xtr, xte) = (probe_features(&stub, &train), probe_features(&stub, &test));
        let mut w = Param::trainable(Matrix::zeros(xtr.cols(), C));
        for _ in 0..200 {
            let mut tape = Tape::new();
            let x = tape.constant(xtr.clone());
            let wv = w.register(&mut tape);
            let logits = tape.matmul(x, wv).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &train.labels).unwrap();
            w.grad = tape.backward(loss).unwrap().get_or_zeros(wv, w.shape());
            w.sgd_step(0.05).unwrap();
        }
        let logits = xte.matmul(&w.value).unwrap();
        let hits = (0..logits.rows())
            .filter(|&i| {
                let row = logits.row(i);
                let best = (0..C).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                best == test.labels[i]
            })
            .count();
        let acc = hits as f64 / logits.rows() as f64;
        assert!(acc > 2.0 / C as f64, "{m}: probe accuracy {acc}");
    }
}

fn lap_mean_u(delta: f64, seed: u64) -> f64 {
    let mut cfg = FederationConfig::new(
        vec![NodeConfig::new(Modality::Image), NodeConfig::new(Modality::Text)],
        Aggregation::Geolora,
        1.0,
    );
    cfg.seed = seed;
    cfg.anchors = AnchorSetSpec {
        real: vec![Modality::Image],
        synthetic: vec![SyntheticAnchor {
            modality: Modality::Text,
            delta,
        }],
        ..AnchorSetSpec::default()
    };
    let fed = Federation::setup(&cfg).unwrap();
    let node = &fed.nodes[1];
    let anchors = node.anchor_embeddings().unwrap();
    let params = TrainParams::from_config(&cfg);
    node.lap_summary(0, &anchors, &params).unwrap().mean_u
}

#[test]
fn shifted_synthetic_anchors_raise_uncertainty() {
    let shifted: Vec<f64> = (0..5).map(|s| lap_mean_u(0.5, s)).collect();
    let exact: Vec<f64> = (0..5).map(|s| lap_mean_u(0.0, s)).collect();
    assert!(
        median(shifted.clone()) > median(exact.clone()),
        "{shifted:?} vs {exact:?}"
    );
}

#[test]
fn zero_noise_makes_concepts_constant() {
    let s = gen_concepts(C, 16, 0.0, 3).unwrap();
    let ds = dataset(&s, Modality::Genetics, 2, 200, Corruption::None, 9);
    for c in 0..C {
        let rows: Vec<&Vec<f64>> = ds
            .samples
            .iter()
            .zip(&ds.labels)
            .filter(|(_, &l)| l == c)
            .map(|(x, _)| x)
            .collect();
        assert!(rows.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn exports_round_trip_through_the_checkpoint_format() {
    let s = space(4);
    let ds = dataset(&s, Modality::Tabular, 3, 40, Corruption::LabelNoise { rate: 0.2 }, 1);
    let anchors = gen_anchor_set(&s, &AnchorSetSpec::default(), &[spec(Modality::Tabular)], RAW_DIM, 6).unwrap();
    let mut tensors = dataset_tensors(&ds).unwrap();
    tensors.extend(anchor_tensors(&anchors[&Modality::Tabular]).unwrap());
    let back = decode_checkpoint(&encode_checkpoint(&tensors)).unwrap();
    assert_eq!(back, tensors);
    assert_eq!(back[0].dims, vec![40, RAW_DIM * 8]);
    let labels: Vec<usize> = back[1].data.iter().map(|&x| x as usize).collect();
    assert_eq!(labels, ds.labels);
    assert_eq!(back[2].dims[0], 2 * C);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generation_is_a_pure_function_of_its_seed(seed in any::<u64>(), node in 0usize..16) {
        let s = space(seed);
        let a = dataset(&s, Modality::Text, node, 20, Corruption::EmbeddingShift { sigma: 0.5 }, seed ^ 3);
        let b = dataset(&space(seed), Modality::Text, node, 20, Corruption::EmbeddingShift { sigma: 0.5 }, seed ^ 3);
        prop_assert_eq!(a.samples, b.samples);
        prop_assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn nodes_never_share_a_sample(seed in any::<u64>(), n0 in 0usize..8, n1 in 8usize..16) {
        // Same federation seed, same modality: only the node id separates the streams.
        let s = space(seed);
        let a = dataset(&s, Modality::Image, n0, 64, Corruption::None, seed);
        let b = dataset(&s, Modality::Image, n1, 64, Corruption::None, seed);
        let seen: HashSet<Vec<u64>> = a.samples.iter().map(|x| x.iter().map(|v| v.to_bits()).collect()).collect();
        prop_assert!(b.samples.iter().all(|x| !seen.contains(&x.iter().map(|v| v.to_bits()).collect::<Vec<_>>())));
    }

    #[test]
    fn concepts_stay_separated(seed in any::<u64>(), n in 2usize..12) {
        let s = gen_concepts(n, 16, 0.3, seed).unwrap();
        prop_assert!(s.min_separation() > 0.6);
        for i in 0..n {
            let r = s.means.row(i);
            prop_assert!((r.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn dense_packing_is_rejected() {
    assert!(gen_concepts(64, 2, 0.3, 0).is_err());
}
