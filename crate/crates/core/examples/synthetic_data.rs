//! Generates a concept space, per-node datasets for every modality and a
//! public anchor set, then writes them to a checkpoint file.

use geofed::model::{Modality, ModalitySpec};
use geofed::synthdata::{
    anchor_tensors, dataset_tensors, gen_anchor_set, gen_concepts, gen_node_dataset, AnchorSetSpec, Corruption,
};
use geofed::tensorio::{load_checkpoint, save_checkpoint};

fn main() -> geofed::Result<()> {
    let space = gen_concepts(8, 16, 0.3, 2026)?;
    println!("8 concepts, min pairwise distance {:.3}", space.min_separation());

    let specs: Vec<ModalitySpec> = Modality::ALL
        .iter()
        .map(|&m| ModalitySpec::with_defaults(m, 8))
        .collect::<geofed::Result<_>>()?;
    let mut tensors = Vec::new();
    for (node, spec) in specs.iter().enumerate() {
        let corruption = if node == 3 {
            Corruption::LabelNoise { rate: 0.3 }
        } else {
            Corruption::None
        };
        let ds = gen_node_dataset(&space, spec, 16, node, 200, corruption, 2026)?;
        println!(
            "node {node}: {:>8} x{} samples of length {}",
            spec.modality.name(),
            ds.len(),
            ds.samples[0].len()
        );
        tensors.extend(dataset_tensors(&ds)?);
    }

    let anchors = gen_anchor_set(&space, &AnchorSetSpec::default(), &specs, 16, 2026)?;
    for set in anchors.values() {
        tensors.extend(anchor_tensors(set)?);
    }

    let path = std::env::temp_dir().join("geofed_synthetic.bin");
    save_checkpoint(&path, &tensors)?;
    let back = load_checkpoint(&path)?;
    println!("wrote {} tensors to {}", back.len(), path.display());
    for t in back.iter().take(4) {
        println!("  {:<28} {:?}", t.name, t.dims);
    }
    Ok(())
}
