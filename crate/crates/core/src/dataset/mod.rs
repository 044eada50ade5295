//! Clip datasets: the synthetic rotating-object generator, object-wise
//! splitting, and the on-disk manifest format.

mod io;
pub mod render;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actions::{DatasetStyle, Pose};
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub use io::{read_manifest, write_manifest, MANIFEST_FILE};
use render::{render, sample_object, Camera, FAMILY_NAMES};

/// Smallest image side the renderer accepts.
pub const MIN_IMAGE_SIZE: usize = 16;
/// Quaternion norm tolerance for stored extrinsics.
pub const EXTRINSICS_NORM_TOLERANCE: f64 = 1e-6;

/// Square 8-bit RGB image, row-major, channels interleaved. Pixel reals are
/// `level / 255`, so storing them in a lossless 8-bit format round-trips
/// exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_categories: usize,
    pub instances_per_category: usize,
    /// Views per revolution; the yaw step is `360 / views_per_object`.
    pub views_per_object: usize,
    pub image_size: usize,
    /// Random base color per instance (otherwise uniform gray).
    pub color_nuisance: bool,
    pub seed: u64,
    /// Camera elevation above the horizon, degrees.
    pub elevation_deg: f64,
    /// `yaw`: the object turns in front of a fixed camera (circular clips).
    /// `pose`: the camera travels an open arc around a fixed object and
    /// every frame carries extrinsics.
    pub style: DatasetStyle,
    /// Arc covered by pose-style trajectories, degrees.
    pub pose_arc_deg: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_categories: 8,
            instances_per_category: 20,
            views_per_object: 36,
            image_size: 64,
            color_nuisance: true,
            seed: 0,
            elevation_deg: 20.0,
            style: DatasetStyle::Yaw,
            pose_arc_deg: 270.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_categories == 0 || self.num_categories > FAMILY_NAMES.len() {
            return bad(format!(
                "num_categories must be in 1..={}, got {}",
                FAMILY_NAMES.len(),
                self.num_categories
            ));
        }
        if self.instances_per_category == 0 {
            return bad("instances_per_category must be positive".into());
        }
        if self.views_per_object < 2 {
            return bad("views_per_object must be at least 2".into());
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return bad(format!(
                "image_size {} is too small to render (minimum {MIN_IMAGE_SIZE})",
                self.image_size
            ));
        }
        if !(0.0..90.0).contains(&self.elevation_deg) {
            return bad("elevation_deg must be in [0, 90)".into());
        }
        if self.style == DatasetStyle::Pose && !(0.0..=360.0).contains(&self.pose_arc_deg) {
            return bad("pose_arc_deg must be in (0, 360]".into());
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.num_categories * self.instances_per_category * self.views_per_object
    }
}

/// One image of one object instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFrame {
    pub category_id: usize,
    pub instance_id: usize,
    pub clip_id: usize,
    pub frame_index: usize,
    /// Object yaw relative to the camera, degrees in `[0, 360)`.
    pub yaw_deg: f64,
    pub extrinsics: Option<Pose>,
    pub orientation_flag: u8,
    pub pixels: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub clip_id: usize,
    pub category_id: usize,
    pub instance_id: usize,
    /// Full revolution: the last frame neighbours the first.
    pub circular: bool,
    pub frames: Vec<ClipFrame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub style: DatasetStyle,
    pub image_size: usize,
    pub categories: Vec<String>,
    pub clips: Vec<Clip>,
}

/// Index of one frame: `(clip position, frame position)` in the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameRef {
    pub clip: usize,
    pub frame: usize,
}

impl DatasetManifest {
    pub fn num_frames(&self) -> usize {
        self.clips.iter().map(|c| c.frames.len()).sum()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn frame(&self, r: FrameRef) -> &ClipFrame {
        &self.clips[r.clip].frames[r.frame]
    }

    /// All frames in manifest order.
    pub fn frame_refs(&self) -> Vec<FrameRef> {
        self.clips
            .iter()
            .enumerate()
            .flat_map(|(c, clip)| (0..clip.frames.len()).map(move |f| FrameRef { clip: c, frame: f }))
            .collect()
    }

    pub fn instance_ids(&self) -> BTreeSet<usize> {
        self.clips.iter().map(|c| c.instance_id).collect()
    }

    /// Checks every frame and clip invariant; errors name the offending
    /// clip and frame.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        let mut seen = BTreeSet::new();
        let mut instance_category = BTreeMap::new();
        for clip in &self.clips {
            let id = clip.clip_id;
            if !seen.insert(id) {
                return bad(format!("duplicate clip id {id}"));
            }
            if clip.category_id >= self.categories.len() {
                return bad(format!("clip {id}: unknown category {}", clip.category_id));
            }
            if let Some(&c) = instance_category.get(&clip.instance_id) {
                if c != clip.category_id {
                    return bad(format!(
                        "clip {id}: instance {} appears under two categories",
                        clip.instance_id
                    ));
                }
            }
            instance_category.insert(clip.instance_id, clip.category_id);
            if clip.frames.is_empty() {
                return bad(format!("clip {id}: no frames"));
            }
            let mut last: Option<usize> = None;
            for f in &clip.frames {
                let at = format!("clip {id} frame {}", f.frame_index);
                if last.is_some_and(|l| f.frame_index <= l) {
                    return bad(format!("{at}: frame_index not strictly increasing"));
                }
                last = Some(f.frame_index);
                if f.clip_id != id || f.instance_id != clip.instance_id || f.category_id != clip.category_id {
                    return bad(format!("{at}: labels disagree with clip"));
                }
                if !(0.0..360.0).contains(&f.yaw_deg) {
                    return bad(format!("{at}: yaw_deg {} outside [0, 360)", f.yaw_deg));
                }
                if f.orientation_flag > 1 {
                    return bad(format!("{at}: orientation flag {}", f.orientation_flag));
                }
                match (&f.extrinsics, self.style) {
                    (None, DatasetStyle::Pose) => {
                        return bad(format!("{at}: pose-style frame without extrinsics"))
                    }
                    (Some(p), _) => {
                        let n = p.rotation.norm();
                        if (n - 1.0).abs() > EXTRINSICS_NORM_TOLERANCE || !n.is_finite() {
                            return bad(format!("{at}: extrinsics quaternion norm {n}"));
                        }
                    }
                    _ => {}
                }
                if f.pixels.size != self.image_size
                    || f.pixels.data.len() != self.image_size * self.image_size * 3
                {
                    return bad(format!("{at}: image is not {0}×{0}×3", self.image_size));
                }
            }
        }
        Ok(())
    }

    /// Git-style content hash (`blob <len>\0` prefix, SHA-256) over the
    /// metadata and pixels.
    pub fn content_hash(&self) -> String {
        let mut body = Vec::new();
        body.extend_from_slice(
            &serde_json::to_vec(&io::Sidecar::from_manifest(self, &|_, _| String::new()))
                .expect("sidecar serializes"),
        );
        for clip in &self.clips {
            for f in &clip.frames {
                body.extend_from_slice(&f.pixels.data);
            }
        }
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(&body);
        hex::encode(h.finalize())
    }

    fn subset(&self, keep: &BTreeSet<usize>) -> DatasetManifest {
        DatasetManifest {
            style: self.style,
            image_size: self.image_size,
            categories: self.categories.clone(),
            clips: self
                .clips
                .iter()
                .filter(|c| keep.contains(&c.instance_id))
                .cloned()
                .collect(),
        }
    }
}

/// Renders the synthetic dataset: one circular clip of `V` uniform yaw
/// steps per instance (or an open camera arc for the pose style).
pub fn generate_synthetic(config: &SynthConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = (0..config.num_categories)
        .flat_map(|c| (0..config.instances_per_category).map(move |i| (c, i)))
        .collect();
    let clips = jobs
        .par_iter()
        .enumerate()
        .map(|(clip_id, &(category, local))| render_clip(config, clip_id, category, local))
        .collect();
    Ok(DatasetManifest {
        style: config.style,
        image_size: config.image_size,
        categories: FAMILY_NAMES[..config.num_categories]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        clips,
    })
}

fn render_clip(config: &SynthConfig, clip_id: usize, category: usize, local: usize) -> Clip {
    let mut rng = rng_for(&[config.seed, category as u64, local as u64]);
    let object = sample_object(category, config.color_nuisance, &mut rng);
    let instance_id = category * config.instances_per_category + local;
    let v = config.views_per_object;
    let (circular, flag, start) = match config.style {
        DatasetStyle::Yaw => (true, 0u8, 0.0),
        DatasetStyle::Pose => {
            use rand::Rng;
            (false, rng.gen_range(0..2u8), rng.gen_range(0.0..360.0))
        }
    };
    let frames = (0..v)
        .map(|k| {
            let (yaw_deg, extrinsics, pixels) = match config.style {
                DatasetStyle::Yaw => {
                    let yaw = k as f64 * 360.0 / v as f64;
                    let cam = Camera::orbit(0.0, config.elevation_deg, false);
                    (yaw, None, render(&object, yaw, &cam, config.image_size))
                }
                DatasetStyle::Pose => {
                    let az = start + k as f64 * config.pose_arc_deg / (v - 1) as f64;
                    let cam = Camera::orbit(az, config.elevation_deg, flag == 1);
                    let yaw = (-az).rem_euclid(360.0);
                    let yaw = if yaw >= 360.0 { 0.0 } else { yaw };
                    (yaw, Some(cam.pose), render(&object, 0.0, &cam, config.image_size))
                }
            };
            ClipFrame {
                category_id: category,
                instance_id,
                clip_id,
                frame_index: k,
                yaw_deg,
                extrinsics,
                orientation_flag: flag,
                pixels,
            }
        })
        .collect();
    Clip {
        clip_id,
        category_id: category,
        instance_id,
        circular,
        frames,
    }
}

/// Object-wise split stratified by category: each category's instances are
/// shuffled with a per-category stream and the first
/// `round(train_fraction · n)` go to train.
pub fn split_objects(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_category: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for c in &manifest.clips {
        by_category.entry(c.category_id).or_default().insert(c.instance_id);
    }
    let mut train = BTreeSet::new();
    for (&cat, instances) in &by_category {
        let mut ids: Vec<usize> = instances.iter().copied().collect();
        if ids.len() < 2 {
            return Err(Error::Split(format!(
                "category {cat} has {} instance(s); need at least 2",
                ids.len()
            )));
        }
        let n_train = (train_fraction * ids.len() as f64).round() as usize;
        if n_train == 0 || n_train == ids.len() {
            return Err(Error::Split(format!(
                "train_fraction {train_fraction} leaves category {cat} empty in one split"
            )));
        }
        ids.shuffle(&mut rng_for(&[seed, 0x5b117, cat as u64]));
        train.extend(ids[..n_train].iter().copied());
    }
    let test: BTreeSet<usize> = manifest.instance_ids().difference(&train).copied().collect();
    Ok((manifest.subset(&train), manifest.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> SynthConfig {
        SynthConfig {
            num_categories: 2,
            instances_per_category: 3,
            views_per_object: 12,
            image_size: 32,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_yaw_steps() {
        let m = generate_synthetic(&tiny(0)).unwrap();
        assert_eq!(m.num_frames(), 72);
        assert_eq!(m.clips.len(), 6);
        assert!(m.clips.iter().all(|c| c.frames.len() == 12 && c.circular));
        assert_eq!(m.clips[0].frames[3].yaw_deg, 90.0);
        m.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&tiny(7)).unwrap();
        let b = generate_synthetic(&tiny(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&tiny(8)).unwrap();
        assert_ne!(a.clips[0].frames[0].pixels, c.clips[0].frames[0].pixels);
    }

    #[test]
    fn generation_ignores_worker_count() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = pool.install(|| generate_synthetic(&tiny(5)).unwrap());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| generate_synthetic(&tiny(5)).unwrap());
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn too_small_images_are_rejected() {
        let cfg = SynthConfig {
            image_size: 15,
            ..tiny(0)
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn pose_style_frames_carry_unit_extrinsics() {
        let cfg = SynthConfig {
            style: DatasetStyle::Pose,
            ..tiny(1)
        };
        let m = generate_synthetic(&cfg).unwrap();
        m.validate().unwrap();
        assert!(m.clips.iter().all(|c| !c.circular));
        for c in &m.clips {
            let flag = c.frames[0].orientation_flag;
            assert!(c.frames.iter().all(|f| f.orientation_flag == flag));
        }
    }

    #[test]
    fn split_three_quarters_of_four() {
        let cfg = SynthConfig {
            instances_per_category: 4,
            views_per_object: 2,
            image_size: 16,
            ..tiny(0)
        };
        let m = generate_synthetic(&cfg).unwrap();
        let (train, test) = split_objects(&m, 0.75, 3).unwrap();
        for cat in 0..2 {
            let n = |d: &DatasetManifest| d.clips.iter().filter(|c| c.category_id == cat).count();
            assert_eq!((n(&train), n(&test)), (3, 1));
        }
    }

    #[test]
    fn split_half_of_six_is_disjoint() {
        let cfg = SynthConfig {
            num_categories: 1,
            instances_per_category: 6,
            views_per_object: 2,
            image_size: 16,
            ..Default::default()
        };
        let m = generate_synthetic(&cfg).unwrap();
        let (train, test) = split_objects(&m, 0.5, 0).unwrap();
        assert_eq!(train.instance_ids().len(), 3);
        assert_eq!(test.instance_ids().len(), 3);
        assert!(train.instance_ids().is_disjoint(&test.instance_ids()));
    }

    #[test]
    fn split_errors() {
        let cfg = SynthConfig {
            instances_per_category: 2,
            views_per_object: 2,
            image_size: 16,
            ..tiny(0)
        };
        let m = generate_synthetic(&cfg).unwrap();
        assert!(matches!(split_objects(&m, 0.9, 0), Err(Error::Split(_))));
        assert!(matches!(split_objects(&m, 1.0, 0), Err(Error::Split(_))));
        let one = SynthConfig {
            instances_per_category: 1,
            ..cfg
        };
        let m = generate_synthetic(&one).unwrap();
        assert!(matches!(split_objects(&m, 0.5, 0), Err(Error::Split(_))));
    }

    #[test]
    fn validation_catches_non_monotone_frames() {
        let mut m = generate_synthetic(&tiny(0)).unwrap();
        m.clips[1].frames.swap(2, 3);
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("clip 1"), "{err}");
    }
}
