//! Cosine Gram matrices, CKA, consensus and the alignment loss on toy
//! anchor embeddings.

use geofed::geometry::{cka, cka_with, consensus, geo_loss, gram_from_embeddings, GramMatrix};
use geofed::numerics::{Matrix, SeededRng};

fn main() -> geofed::Result<()> {
    let mut rng = SeededRng::new(11);
    let anchors = 8;
    let shared = rng.gaussian_matrix(anchors, 6, 1.0);

    // Two "modalities" see the same anchors through different random
    // rotations plus noise; a third sees unrelated embeddings.
    let view = |rng: &mut SeededRng, noise: f64| -> geofed::Result<Matrix> {
        let rotation = rng.gaussian_matrix(6, 12, 1.0);
        let mut e = shared.matmul(&rotation)?;
        e.axpy(1.0, &rng.gaussian_matrix(anchors, 12, noise))?;
        Ok(e)
    };
    let image = gram_from_embeddings(&view(&mut rng, 0.1)?)?;
    let text = gram_from_embeddings(&view(&mut rng, 0.1)?)?;
    let unrelated = gram_from_embeddings(&rng.gaussian_matrix(anchors, 12, 1.0))?;

    println!("CKA(image, text)      = {:.4}", cka(&image, &text)?);
    println!("CKA(image, unrelated) = {:.4}", cka(&image, &unrelated)?);
    println!("centered CKA(image, text) = {:.4}", cka_with(&image, &text, true)?);
    println!("CKA(image, 3 * image) = {:.4}", cka(&image, &image.scale(3.0)?)?);

    let grams: Vec<GramMatrix> = [image, text, unrelated]
        .into_iter()
        .enumerate()
        .map(|(node_id, g)| GramMatrix { g, node_id, round: 0 })
        .collect();
    let kernel = consensus(&grams)?;
    for g in &grams {
        println!(
            "node {} alignment loss vs consensus: {:.4}",
            g.node_id,
            geo_loss(&g.g, &kernel, false)?
        );
    }
    Ok(())
}
