//! A four-node, two-modality federation trained with and without the
//! alignment term.

use geofed::federation::{run_federation, Aggregation, FederationConfig, NodeConfig, Weighting};
use geofed::model::Modality;

fn main() -> geofed::Result<()> {
    let nodes = vec![
        NodeConfig::new(Modality::Image),
        NodeConfig::new(Modality::Image),
        NodeConfig::new(Modality::Text),
        NodeConfig::new(Modality::Text),
    ];
    for lambda in [1.0, 0.0] {
        let mut cfg = FederationConfig::new(nodes.clone(), Aggregation::Geolora, lambda);
        cfg.rounds = 10;
        cfg.weighting = Weighting::Precision;
        let rec = run_federation(&cfg)?;
        println!("lambda = {lambda}");
        for r in rec.rounds.iter().step_by(3) {
            let cka: Vec<String> = r.nodes.iter().map(|n| format!("{:.3}", n.cka_to_consensus)).collect();
            let p: Vec<String> = r.nodes.iter().map(|n| format!("{:.3}", n.p_k)).collect();
            println!(
                "  round {:>2}: CKA to consensus [{}], p_k [{}]",
                r.round,
                cka.join(" "),
                p.join(" ")
            );
        }
        println!(
            "  cross-modal CKA {:.4} -> {:.4}, accuracy {:.3} -> {:.3}, retrieval {:.3} (chance {:.3})",
            rec.init.mean_cross_modal_cka.unwrap_or(f64::NAN),
            rec.final_eval.mean_cross_modal_cka.unwrap_or(f64::NAN),
            rec.init.mean_accuracy,
            rec.final_eval.mean_accuracy,
            rec.final_eval.retrieval_top1.unwrap_or(f64::NAN),
            rec.final_eval.retrieval_chance
        );
    }
    Ok(())
}
