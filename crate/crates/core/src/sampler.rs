//! Positive-pair sampling and triplet batch assembly.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actions::{relative_pose_action, wrap_degrees, yaw_action, Action, DatasetStyle};
use crate::augment::{augment_pair, AugConfig, ViewParams};
use crate::dataset::{Clip, DatasetManifest, FrameRef};
use crate::error::{Error, Result};
use crate::nn::{FeatureMap, Matrix};
use crate::seed::rng_for;

const WINDOW_SLACK_DEG: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PairStrategy {
    /// The partner is the anchor itself.
    #[serde(rename = "self")]
    SelfPair,
    /// Direct predecessor or successor.
    Adjacent,
    /// Any other frame of the clip.
    UniformClip,
    /// Any other frame within `window_deg` of yaw.
    Window { window_deg: f64 },
}

impl PairStrategy {
    pub fn validate(&self) -> Result<()> {
        match self {
            PairStrategy::Window { window_deg } if !(*window_deg > 0.0) => Err(Error::Config(format!(
                "window_deg must be positive, got {window_deg}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Draws the partner frame position for anchor position `t`.
///
/// Adjacent sampling wraps on circular clips and clamps to the only
/// neighbour at the ends of open ones. Window distances are angular
/// (wrapped) yaw differences.
pub fn sample_positive(clip: &Clip, t: usize, strategy: PairStrategy, rng: &mut impl Rng) -> Result<usize> {
    let n = clip.frames.len();
    if t >= n {
        return Err(Error::Sampling(format!("clip {}: anchor {t} out of range", clip.clip_id)));
    }
    if strategy != PairStrategy::SelfPair && n < 2 {
        return Err(Error::Sampling(format!(
            "clip {}: needs at least 2 frames for a distinct partner",
            clip.clip_id
        )));
    }
    Ok(match strategy {
        PairStrategy::SelfPair => t,
        PairStrategy::Adjacent => {
            let forward = rng.gen_bool(0.5);
            if clip.circular {
                if forward {
                    (t + 1) % n
                } else {
                    (t + n - 1) % n
                }
            } else if t == 0 {
                1
            } else if t == n - 1 {
                n - 2
            } else if forward {
                t + 1
            } else {
                t - 1
            }
        }
        PairStrategy::UniformClip => {
            let k = rng.gen_range(0..n - 1);
            if k >= t {
                k + 1
            } else {
                k
            }
        }
        PairStrategy::Window { window_deg } => {
            let candidates = window_candidates(clip, t, window_deg);
            if candidates.is_empty() {
                return Err(Error::Sampling(format!(
                    "clip {} frame {t}: no partner within {window_deg} degrees",
                    clip.clip_id
                )));
            }
            candidates[rng.gen_range(0..candidates.len())]
        }
    })
}

/// Frame positions eligible under a window strategy, excluding `t`.
pub fn window_candidates(clip: &Clip, t: usize, window_deg: f64) -> Vec<usize> {
    let yaw = clip.frames[t].yaw_deg;
    (0..clip.frames.len())
        .filter(|&k| k != t && wrap_degrees(clip.frames[k].yaw_deg - yaw).abs() <= window_deg + WINDOW_SLACK_DEG)
        .collect()
}

/// The action between two frames of a manifest.
pub fn frame_action(dataset: &DatasetManifest, a: FrameRef, b: FrameRef) -> Result<Action> {
    let (fa, fb) = (dataset.frame(a), dataset.frame(b));
    match dataset.style {
        DatasetStyle::Yaw => Ok(yaw_action(fa.yaw_deg, fb.yaw_deg)),
        DatasetStyle::Pose => {
            let missing = |f: FrameRef| {
                Error::Sampling(format!("clip {} frame {}: no extrinsics", a.clip, f.frame))
            };
            let pa = fa.extrinsics.ok_or_else(|| missing(a))?;
            let pb = fb.extrinsics.ok_or_else(|| missing(b))?;
            relative_pose_action(&pa, &pb, fa.orientation_flag)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub clip_id: usize,
    pub t: usize,
    pub t2: usize,
}

#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub views_t: FeatureMap,
    pub views_t2: FeatureMap,
    /// Raw flat actions, one row per triplet.
    pub actions: Matrix,
    pub action_values: Vec<Action>,
    pub anchors: Vec<FrameRef>,
    pub partners: Vec<FrameRef>,
    pub provenance: Vec<Provenance>,
    /// `(category_id, instance_id)` per triplet.
    pub labels: Vec<(usize, usize)>,
    pub view_params: Vec<(ViewParams, ViewParams)>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// `B` anchors drawn uniformly over all frames (with replacement), then
/// assembled by [`build_batch_from`].
pub fn build_batch(
    dataset: &DatasetManifest,
    batch_size: usize,
    strategy: PairStrategy,
    aug: &AugConfig,
    seed: u64,
) -> Result<TripletBatch> {
    let refs = dataset.frame_refs();
    if refs.is_empty() || batch_size == 0 {
        return Err(Error::Sampling("empty dataset or zero batch size".into()));
    }
    let mut rng = rng_for(&[seed, 0xa7c4]);
    let anchors: Vec<FrameRef> = (0..batch_size).map(|_| refs[rng.gen_range(0..refs.len())]).collect();
    build_batch_from(dataset, &anchors, strategy, aug, seed)
}

/// Assembles triplets for the given anchors. Each triplet draws from its own
/// stream `(seed, position)`, so the result does not depend on how work is
/// split across threads.
pub fn build_batch_from(
    dataset: &DatasetManifest,
    anchors: &[FrameRef],
    strategy: PairStrategy,
    aug: &AugConfig,
    seed: u64,
) -> Result<TripletBatch> {
    strategy.validate()?;
    if anchors.is_empty() {
        return Err(Error::Sampling("no anchors".into()));
    }
    let size = dataset.image_size;
    let parts: Vec<_> = anchors
        .par_iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut rng = rng_for(&[seed, i as u64]);
            let clip = &dataset.clips[a.clip];
            let t2 = sample_positive(clip, a.frame, strategy, &mut rng)?;
            let b = FrameRef { clip: a.clip, frame: t2 };
            let action = frame_action(dataset, a, b)?;
            let (xa, xb) = (dataset.frame(a).pixels.to_f32(), dataset.frame(b).pixels.to_f32());
            let (va, vb) = augment_pair(&xa, &xb, size, aug, dataset.style, &mut rng);
            Ok((b, action, va, vb))
        })
        .collect::<Result<_>>()?;
    let n = anchors.len();
    let px = size * size * 3;
    let (mut vt, mut vt2) = (Vec::with_capacity(n * px), Vec::with_capacity(n * px));
    let mut flat = Vec::new();
    let mut batch = TripletBatch {
        views_t: FeatureMap::new(0, size, size, 3, Vec::new()),
        views_t2: FeatureMap::new(0, size, size, 3, Vec::new()),
        actions: Matrix::zeros(0, 0),
        action_values: Vec::with_capacity(n),
        anchors: anchors.to_vec(),
        partners: Vec::with_capacity(n),
        provenance: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        view_params: Vec::with_capacity(n),
    };
    for (&a, (b, action, va, vb)) in anchors.iter().zip(parts) {
        let clip = &dataset.clips[a.clip];
        vt.extend_from_slice(&va.pixels);
        vt2.extend_from_slice(&vb.pixels);
        flat.extend(action.flat().into_iter().map(|v| v as f32));
        batch.action_values.push(action);
        batch.partners.push(b);
        batch.provenance.push(Provenance {
            clip_id: clip.clip_id,
            t: clip.frames[a.frame].frame_index,
            t2: clip.frames[b.frame].frame_index,
        });
        batch.labels.push((clip.category_id, clip.instance_id));
        batch.view_params.push((va.params, vb.params));
    }
    let dim = dataset.style.action_dim();
    batch.views_t = FeatureMap::new(n, size, size, 3, vt);
    batch.views_t2 = FeatureMap::new(n, size, size, 3, vt2);
    batch.actions = Matrix::from_vec(n, dim, flat);
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, ClipFrame, Image, SynthConfig};

    fn bare_clip(n: usize, circular: bool) -> Clip {
        Clip {
            clip_id: 0,
            category_id: 0,
            instance_id: 0,
            circular,
            frames: (0..n)
                .map(|k| ClipFrame {
                    category_id: 0,
                    instance_id: 0,
                    clip_id: 0,
                    frame_index: k,
                    yaw_deg: k as f64 * 360.0 / n as f64,
                    extrinsics: None,
                    orientation_flag: 0,
                    pixels: Image { size: 0, data: vec![] },
                })
                .collect(),
        }
    }

    #[test]
    fn self_is_identity() {
        let clip = bare_clip(5, true);
        let mut rng = rng_for(&[0]);
        for t in 0..5 {
            assert_eq!(sample_positive(&clip, t, PairStrategy::SelfPair, &mut rng).unwrap(), t);
        }
    }

    #[test]
    fn adjacent_wraps_on_circular_clips() {
        let clip = bare_clip(180, true);
        let mut rng = rng_for(&[1]);
        let seen: std::collections::BTreeSet<usize> = (0..200)
            .map(|_| sample_positive(&clip, 0, PairStrategy::Adjacent, &mut rng).unwrap())
            .collect();
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![1, 179]);
    }

    #[test]
    fn adjacent_clamps_on_open_clips() {
        let clip = bare_clip(6, false);
        let mut rng = rng_for(&[2]);
        for _ in 0..50 {
            assert_eq!(sample_positive(&clip, 0, PairStrategy::Adjacent, &mut rng).unwrap(), 1);
            assert_eq!(sample_positive(&clip, 5, PairStrategy::Adjacent, &mut rng).unwrap(), 4);
        }
    }

    #[test]
    fn window_candidates_on_two_degree_clip() {
        let clip = bare_clip(180, true);
        let c = window_candidates(&clip, 0, 60.0);
        let expected: Vec<usize> = (1..=30).chain(150..180).collect();
        assert_eq!(c, expected);
    }

    #[test]
    fn empty_window_is_an_error() {
        let clip = bare_clip(4, true);
        let strategy = PairStrategy::Window { window_deg: 10.0 };
        assert!(matches!(
            sample_positive(&clip, 0, strategy, &mut rng_for(&[0])),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn uniform_clip_passes_chi_square() {
        let clip = bare_clip(10, true);
        let mut rng = rng_for(&[42]);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_positive(&clip, 4, PairStrategy::UniformClip, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[4], 0);
        let expected = draws as f64 / 9.0;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != 4)
            .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
            .sum();
        // Upper 1% point of chi-square with 8 degrees of freedom.
        assert!(chi2 < 20.090, "chi2 = {chi2}");
    }

    fn small(style: DatasetStyle) -> DatasetManifest {
        generate_synthetic(&SynthConfig {
            num_categories: 2,
            instances_per_category: 2,
            views_per_object: 8,
            image_size: 16,
            style,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn self_batches_carry_identity_actions() {
        let m = small(DatasetStyle::Yaw);
        let b = build_batch(&m, 12, PairStrategy::SelfPair, &AugConfig::default(), 3).unwrap();
        for r in 0..12 {
            assert_eq!(b.actions.row(r), &[0.0, 1.0]);
        }
    }

    #[test]
    fn batches_stay_in_clip_and_actions_recompute() {
        for style in [DatasetStyle::Yaw, DatasetStyle::Pose] {
            let m = small(style);
            let b = build_batch(&m, 16, PairStrategy::UniformClip, &AugConfig::default(), 5).unwrap();
            assert_eq!(b.views_t.n, 16);
            assert_eq!(b.actions.cols, style.action_dim());
            for i in 0..16 {
                assert_eq!(b.anchors[i].clip, b.partners[i].clip);
                let clip = &m.clips[b.anchors[i].clip];
                assert_eq!(clip.clip_id, b.provenance[i].clip_id);
                let recomputed = frame_action(&m, b.anchors[i], b.partners[i]).unwrap();
                for (x, y) in recomputed.flat().iter().zip(b.action_values[i].flat()) {
                    assert!((x - y).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn batches_are_deterministic_across_thread_counts() {
        let m = small(DatasetStyle::Yaw);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| build_batch(&m, 10, PairStrategy::Adjacent, &AugConfig::default(), 11).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.views_t.data, b.views_t.data);
        assert_eq!(a.views_t2.data, b.views_t2.data);
        assert_eq!(a.provenance, b.provenance);
    }
}
