//! Renders a small yaw-style dataset, writes it to disk, reads it back and
//! splits it by object.
//!
//! `cargo run --example generate_dataset -- [out_dir]`

use aassl::dataset::{generate_synthetic, read_manifest, split_objects, write_manifest, SynthConfig};

fn main() -> aassl::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example_data".into());
    let cfg = SynthConfig {
        num_categories: 4,
        instances_per_category: 6,
        views_per_object: 12,
        image_size: 48,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg)?;
    write_manifest(&data, out.as_ref())?;

    let back = read_manifest(out.as_ref())?;
    assert_eq!(back.content_hash(), data.content_hash());
    println!("{} frames in {} clips, hash {}", back.num_frames(), back.clips.len(), back.content_hash());

    let (train, test) = split_objects(&back, 0.5, 0)?;
    println!(
        "train objects {:?}\ntest objects  {:?}",
        train.instance_ids(),
        test.instance_ids()
    );
    let first = &back.clips[0].frames;
    let yaws: Vec<f64> = first.iter().map(|f| f.yaw_deg).collect();
    println!("clip 0 ({}): yaw {:?}", back.categories[back.clips[0].category_id], yaws);
    Ok(())
}
