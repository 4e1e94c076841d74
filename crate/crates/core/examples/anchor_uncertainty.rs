//! Latent anchor-proximity uncertainty and the precision weights it
//! induces over a small federation.

use geofed::numerics::{Matrix, SeededRng};
use geofed::uncertainty::{node_summary, precision_weights, NodeWeights, WeightMode, DEFAULT_U_MIN};

fn main() -> geofed::Result<()> {
    let mut rng = SeededRng::new(5);
    let anchors = rng.gaussian_matrix(8, 16, 1.0);

    // Nodes whose embeddings sit increasingly far from the anchors.
    let mut summaries = Vec::new();
    for (node, spread) in [0.05, 0.3, 1.0, 4.0].into_iter().enumerate() {
        let rows: Vec<Vec<f64>> = (0..64)
            .map(|i| {
                let a = anchors.row(i % 8);
                a.iter().map(|&x| x + spread * rng.gaussian()).collect()
            })
            .collect();
        let samples = Matrix::from_rows(&rows)?;
        let s = node_summary(node, &samples, &anchors, 64, DEFAULT_U_MIN)?;
        println!(
            "node {node}: spread {spread:<4}  mean u {:.4}  mean 1/u {:>8.2}  clamped {:.2}",
            s.mean_u, s.mean_inv_u, s.clamped_fraction
        );
        summaries.push(s);
    }

    let precision = precision_weights(&summaries, WeightMode::MeanInvU)?;
    let uniform = NodeWeights::uniform(&[0, 1, 2, 3])?;
    for ((id, p), (_, u)) in precision.weights.iter().zip(&uniform.weights) {
        println!("node {id}: precision weight {p:.4}  uniform {u:.4}");
    }
    Ok(())
}
