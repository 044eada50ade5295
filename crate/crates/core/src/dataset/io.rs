//! Directory layout: `manifest.json` at the root plus one PNG per frame at
//! `<category>/<instance>/<frame>.png`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Clip, ClipFrame, DatasetManifest, Image};
use crate::actions::{DatasetStyle, Pose, Quat};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct Sidecar {
    format_version: u32,
    style: DatasetStyle,
    image_size: usize,
    categories: Vec<String>,
    clips: Vec<SidecarClip>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarClip {
    clip_id: usize,
    category_id: usize,
    instance_id: usize,
    circular: bool,
    frames: Vec<SidecarFrame>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarFrame {
    frame_index: usize,
    yaw_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extrinsics: Option<SidecarPose>,
    orientation_flag: u8,
    file: String,
}

/// Rotation as `[w, x, y, z]`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarPose {
    rotation: [f64; 4],
    translation: [f64; 3],
}

fn frame_path(m: &DatasetManifest, clip: &Clip, frame: &ClipFrame) -> String {
    format!(
        "{}/{:05}/{:04}.png",
        m.categories[clip.category_id], clip.instance_id, frame.frame_index
    )
}

impl Sidecar {
    pub(super) fn from_manifest(
        m: &DatasetManifest,
        file: &dyn Fn(&Clip, &ClipFrame) -> String,
    ) -> Sidecar {
        Sidecar {
            format_version: FORMAT_VERSION,
            style: m.style,
            image_size: m.image_size,
            categories: m.categories.clone(),
            clips: m
                .clips
                .iter()
                .map(|c| SidecarClip {
                    clip_id: c.clip_id,
                    category_id: c.category_id,
                    instance_id: c.instance_id,
                    circular: c.circular,
                    frames: c
                        .frames
                        .iter()
                        .map(|f| SidecarFrame {
                            frame_index: f.frame_index,
                            yaw_deg: f.yaw_deg,
                            extrinsics: f.extrinsics.map(|p| SidecarPose {
                                rotation: p.rotation.as_array(),
                                translation: p.translation,
                            }),
                            orientation_flag: f.orientation_flag,
                            file: file(c, f),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Writes the sidecar and one PNG per frame; validates first so nothing
/// malformed reaches disk.
pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    manifest.validate()?;
    if manifest.categories.iter().any(|c| c.is_empty() || c.contains(['/', '\\']) || c == "..") {
        return Err(Error::Validation("category names must be plain path components".into()));
    }
    let sidecar = Sidecar::from_manifest(manifest, &|c, f| frame_path(manifest, c, f));
    for (clip, sc) in manifest.clips.iter().zip(&sidecar.clips) {
        for (frame, sf) in clip.frames.iter().zip(&sc.frames) {
            let path = dir.join(&sf.file);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).at(parent)?;
            }
            let s = manifest.image_size as u32;
            image::save_buffer(&path, &frame.pixels.data, s, s, image::ExtendedColorType::Rgb8)?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    fs::create_dir_all(dir).at(dir)?;
    fs::write(&path, serde_json::to_string_pretty(&sidecar)?).at(&path)?;
    Ok(())
}

/// Reads and validates a manifest directory.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: malformed sidecar: {e}", path.display())))?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported sidecar format_version {}",
            sidecar.format_version
        )));
    }
    let size = sidecar.image_size;
    let mut clips = Vec::with_capacity(sidecar.clips.len());
    for sc in sidecar.clips {
        let mut frames = Vec::with_capacity(sc.frames.len());
        for sf in sc.frames {
            let at = format!("clip {} frame {}", sc.clip_id, sf.frame_index);
            let extrinsics = sf.extrinsics.map(|p| {
                let [w, x, y, z] = p.rotation;
                Pose {
                    rotation: Quat::new(w, x, y, z),
                    translation: p.translation,
                }
            });
            let file = dir.join(&sf.file);
            let img = image::open(&file)
                .map_err(|e| Error::Validation(format!("{at}: cannot load {}: {e}", file.display())))?
                .into_rgb8();
            if img.width() as usize != size || img.height() as usize != size {
                return Err(Error::Validation(format!(
                    "{at}: image is {}×{}, expected {size}×{size}",
                    img.width(),
                    img.height()
                )));
            }
            frames.push(ClipFrame {
                category_id: sc.category_id,
                instance_id: sc.instance_id,
                clip_id: sc.clip_id,
                frame_index: sf.frame_index,
                yaw_deg: sf.yaw_deg,
                extrinsics,
                orientation_flag: sf.orientation_flag,
                pixels: Image {
                    size,
                    data: img.into_raw(),
                },
            });
        }
        clips.push(Clip {
            clip_id: sc.clip_id,
            category_id: sc.category_id,
            instance_id: sc.instance_id,
            circular: sc.circular,
            frames,
        });
    }
    let manifest = DatasetManifest {
        style: sidecar.style,
        image_size: size,
        categories: sidecar.categories,
        clips,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    fn small(style: DatasetStyle) -> DatasetManifest {
        generate_synthetic(&SynthConfig {
            num_categories: 2,
            instances_per_category: 2,
            views_per_object: 4,
            image_size: 16,
            style,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for style in [DatasetStyle::Yaw, DatasetStyle::Pose] {
            let m = small(style);
            let dir = tempfile::tempdir().unwrap();
            write_manifest(&m, dir.path()).unwrap();
            assert_eq!(read_manifest(dir.path()).unwrap(), m);
        }
    }

    #[test]
    fn short_quaternion_is_rejected_with_location() {
        let m = small(DatasetStyle::Pose);
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&m, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["clips"][1]["frames"][2]["extrinsics"]["rotation"] = serde_json::json!([0.9, 0.0, 0.0, 0.0]);
        fs::write(&path, v.to_string()).unwrap();
        let err = read_manifest(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let msg = err.to_string();
        assert!(msg.contains("clip 1 frame 2"), "{msg}");
    }

    #[test]
    fn missing_frame_file_names_the_frame() {
        let m = small(DatasetStyle::Yaw);
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&m, dir.path()).unwrap();
        let c = &m.clips[3];
        fs::remove_file(dir.path().join(frame_path(&m, c, &c.frames[1]))).unwrap();
        let msg = read_manifest(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("clip 3 frame 1"), "{msg}");
    }

    #[test]
    fn malformed_sidecar_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{\"clips\": 3}").unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Validation(_))));
    }
}
