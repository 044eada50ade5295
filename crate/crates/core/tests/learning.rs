//! Every method lowers its own objective on a small dataset, for both
//! dataset styles, and writes a complete run directory.

use aassl::actions::DatasetStyle;
use aassl::dataset::{generate_synthetic, DatasetManifest, SynthConfig};
use aassl::models::{BackboneConfig, HeadConfig};
use aassl::train::{read_run_manifest, run_training, Method, MetricsLog, TrainConfig, FINAL_CHECKPOINT, METRICS_FILE};

fn data(style: DatasetStyle) -> DatasetManifest {
    generate_synthetic(&SynthConfig {
        num_categories: 2,
        instances_per_category: 4,
        views_per_object: 12,
        image_size: 32,
        style,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn config(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 12,
        batch_size: 16,
        base_lr: Some(2e-3),
        backbone: BackboneConfig {
            stem_channels: 8,
            stem_patch: 4,
            stage_channels: vec![16, 32],
            residual_blocks: true,
            embed_dim: 32,
        },
        inv_head: HeadConfig { hidden_layers: 1, hidden_width: 32, output_dim: 16 },
        action_head: HeadConfig { hidden_layers: 1, hidden_width: 32, output_dim: 16 },
        ..TrainConfig::default()
    }
}

fn first_and_last(m: &MetricsLog) -> (f64, f64) {
    (m.epochs.first().unwrap().mean_total, m.epochs.last().unwrap().mean_total)
}

#[test]
fn every_method_reduces_its_loss_on_yaw_clips() {
    let data = data(DatasetStyle::Yaw);
    let mut stuck = Vec::new();
    for m in Method::ALL {
        let out = run_training(&data, &config(m), None).unwrap();
        let (first, last) = first_and_last(&out.metrics);
        assert!(first.is_finite() && last.is_finite(), "{m}: non-finite loss");
        if last >= first {
            stuck.push(format!("{m}: {first:.4} -> {last:.4}"));
        }
    }
    assert!(stuck.is_empty(), "{stuck:?}");
}

#[test]
fn action_methods_reduce_their_loss_on_pose_trajectories() {
    let data = data(DatasetStyle::Pose);
    for m in [Method::AaSimclr, Method::AaVicreg, Method::SimclrEquimod, Method::VicregCiper, Method::AaSimclrNoInv] {
        let out = run_training(&data, &config(m), None).unwrap();
        let (first, last) = first_and_last(&out.metrics);
        assert!(last < first, "{m}: {first:.4} -> {last:.4}");
        if m == Method::VicregCiper {
            assert_eq!(out.manifest.action_stats.as_ref().unwrap().dim(), 8);
        }
    }
}

#[test]
fn run_directory_is_complete_and_consistent() {
    let data = data(DatasetStyle::Yaw);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 2, ..config(Method::AaSimclr) };
    let out = run_training(&data, &cfg, Some(dir.path())).unwrap();
    assert!(dir.path().join(FINAL_CHECKPOINT).is_file());
    let logged = MetricsLog::read(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(logged.steps, out.metrics.steps);
    assert_eq!(logged.epochs.len(), 2);
    let manifest = read_run_manifest(dir.path()).unwrap();
    assert_eq!(manifest, out.manifest);
    assert_eq!(manifest.dataset_hash, data.content_hash());
    assert_eq!(out.metrics.steps.len(), 2 * manifest.steps_per_epoch);
}
