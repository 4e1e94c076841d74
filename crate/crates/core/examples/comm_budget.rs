//! Uplink savings of B-only adapters against full-matrix updates across
//! model widths and ranks.

use geofed::federation::{comm_savings, message_savings, update_message_bytes, Aggregation, SavingsMode};
use geofed::model::TransformerConfig;

fn main() -> geofed::Result<()> {
    println!("{:>6} {:>4} {:>12} {:>12}", "d", "r", "B only", "B and A");
    for d in [256, 1024, 4096] {
        for r in [1, 4, 16] {
            println!(
                "{d:>6} {r:>4} {:>11.4}% {:>11.4}%",
                100.0 * comm_savings(d, r, SavingsMode::BOnly)?,
                100.0 * comm_savings(d, r, SavingsMode::BAndA)?
            );
        }
    }

    let cfg = TransformerConfig::default();
    let anchors = 16;
    for agg in [Aggregation::Geolora, Aggregation::Geodora, Aggregation::FedavgFull] {
        println!(
            "{:<12} update message {:>7} bytes, savings vs full {:.2}%",
            agg.name(),
            update_message_bytes(&cfg, agg, anchors),
            100.0 * message_savings(&cfg, agg, anchors)
        );
    }
    Ok(())
}
