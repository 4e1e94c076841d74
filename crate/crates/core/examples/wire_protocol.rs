//! One round of traffic: encode a broadcast and an update, decode them,
//! account their bytes and run the privacy walk.

use geofed::federation::{
    privacy_findings, shared_layout, update_message_bytes, Aggregation, Federation, FederationConfig, NodeConfig,
    NodeUpdateMessage, PrivacyShapes,
};
use geofed::model::Modality;

fn main() -> geofed::Result<()> {
    let nodes = vec![NodeConfig::new(Modality::Image), NodeConfig::new(Modality::Genetics)];
    let mut cfg = FederationConfig::new(nodes, Aggregation::Geodora, 1.0);
    cfg.local_steps = 2;
    let mut fed = Federation::setup(&cfg)?;
    let traffic = fed.step_round()?;

    println!("broadcast: {} bytes", traffic.broadcast.len());
    let layout = shared_layout(&cfg.model, cfg.aggregation);
    for (node, bytes) in fed.nodes.iter().zip(&traffic.uploads) {
        let msg = NodeUpdateMessage::decode(bytes)?;
        println!(
            "node {} upload: {} bytes (predicted {}), {} tensors, Gram {}x{}, mean 1/u {:.2}",
            msg.node_id,
            bytes.len(),
            update_message_bytes(&cfg.model, cfg.aggregation, cfg.anchor_count()),
            msg.tensors.len(),
            msg.gram.size(),
            msg.gram.size(),
            msg.uncertainty.mean_inv_u
        );
        for t in msg.tensors.iter().take(3) {
            println!("    {:<14} {:?}", t.name, t.dims);
        }
        let spec = node.stub.spec;
        let shapes = PrivacyShapes::for_node(node.stub.sample_len(), cfg.data.raw_dim, spec.token_dim, &cfg.model);
        println!("    privacy findings: {:?}", privacy_findings(bytes, &shapes, &layout)?);
    }
    Ok(())
}
