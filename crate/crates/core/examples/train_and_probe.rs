//! Trains AA-SimCLR and SimCLR-TT on a small dataset, then compares their
//! frozen backbones with a linear probe, the adjacent-frame invariance
//! score and the view-alignment ratio G.
//!
//! `cargo run --release --example train_and_probe`

use aassl::dataset::{generate_synthetic, split_objects, SynthConfig};
use aassl::eval::{embed_dataset, invariance_score, linear_probe, view_alignment_g, LayerTag, ProbeConfig};
use aassl::models::BackboneConfig;
use aassl::train::{run_training, Method, TrainConfig};

fn main() -> aassl::Result<()> {
    let data = generate_synthetic(&SynthConfig {
        num_categories: 4,
        instances_per_category: 8,
        views_per_object: 12,
        image_size: 32,
        ..SynthConfig::default()
    })?;
    let (train, test) = split_objects(&data, 0.5, 0)?;
    for method in [Method::SimclrTt, Method::AaSimclr] {
        let cfg = TrainConfig {
            method,
            epochs: 10,
            batch_size: 32,
            base_lr: Some(2e-3),
            backbone: BackboneConfig {
                stem_channels: 8,
                stage_channels: vec![16, 32, 64],
                embed_dim: 64,
                ..BackboneConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = run_training(&train, &cfg, None)?;
        let curve = out.metrics.loss_curve();
        let tr = embed_dataset(&out.bundle, &train, LayerTag::Backbone)?;
        let te = embed_dataset(&out.bundle, &test, LayerTag::Backbone)?;
        let probe = linear_probe(&tr, &te, &ProbeConfig::default())?;
        println!(
            "{method:<10} loss {:.3} -> {:.3}  probe {:.3}  invariance {:.4}  G {:.4}",
            curve[0],
            curve[curve.len() - 1],
            probe.accuracy,
            invariance_score(&te)?,
            view_alignment_g(&te, false)?
        );
    }
    Ok(())
}
