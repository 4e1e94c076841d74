//! Frozen-A LoRA and DoRA attachments on the shared transformer, and how
//! they fold back into dense weights.

use geofed::model::{
    dora_compose, effective_weight, AdaptMode, Adapter, Modality, ModalitySpec, SharedModel, TokenizerStub,
    TransformerConfig,
};
use geofed::numerics::{column_norms, SeededRng};

fn main() -> geofed::Result<()> {
    let cfg = TransformerConfig::default();
    let mut rng = SeededRng::new(1);

    for mode in [AdaptMode::Lora, AdaptMode::Dora] {
        let mut model = SharedModel::init(&cfg, 42, Some(mode))?;
        println!(
            "{mode:?}: {} attachments, rank {}",
            model.attachments.len(),
            cfg.lora_rank
        );

        // A fresh attachment is an exact no-op.
        let att = &model.attachments[0];
        let theta = &model.params.attn(att.target).value;
        println!(
            "  fresh {}: |W_eff - theta| = {:.1e}",
            att.target,
            effective_weight(theta, att)?.max_abs_diff(theta)
        );

        for att in &mut model.attachments {
            att.b.value = rng.gaussian_matrix(cfg.d_model, cfg.lora_rank, 0.2);
        }
        let att = &model.attachments[0];
        let theta = &model.params.attn(att.target).value;
        let w = effective_weight(theta, att)?;
        println!("  trained b: |W_eff - theta| = {:.3}", w.max_abs_diff(theta));
        if let Some(m) = &att.m {
            let norms = column_norms(&w);
            let gap = norms
                .iter()
                .zip(m.value.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            println!("  DoRA column norms equal m up to {gap:.1e}");
        }

        let spec = ModalitySpec::with_defaults(Modality::Image, cfg.seq_len)?;
        let stub = TokenizerStub::new(spec, 16, 3)?;
        let adapter = Adapter::new(spec.token_dim, cfg.d_model, &mut rng);
        let x: Vec<f64> = (0..stub.sample_len()).map(|i| (i as f64).sin()).collect();
        let (pooled, logits) = model.embed(&stub, &adapter, &[x])?;
        let logits: Vec<String> = logits.row(0).iter().map(|z| format!("{z:+.3}")).collect();
        println!("  pooled embedding {:?}, logits [{}]", pooled.shape(), logits.join(" "));
    }

    let mut rng = SeededRng::new(2);
    let dir = dora_compose(&rng.gaussian_matrix(4, 4, 1.0), &[1.0; 4], "demo")?;
    println!("unit-magnitude DoRA direction column norms: {:?}", column_norms(&dir));
    Ok(())
}
