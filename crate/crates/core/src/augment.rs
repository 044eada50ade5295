//! Image augmentation. Applied in a fixed order: random resized crop,
//! horizontal flip, color jitter, grayscale. Every random draw is returned
//! alongside the image so callers can inspect or share it.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actions::DatasetStyle;
use crate::error::{Error, Result};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    /// Minimal crop area as a fraction of the image.
    pub crop_min_area: f64,
    /// Aspect-ratio range of the crop; `[1, 1]` disables aspect jitter.
    pub crop_aspect: [f64; 2],
    pub enable_color_jitter: bool,
    pub enable_grayscale: bool,
    /// `None` picks by dataset style: off for yaw, on for pose.
    pub enable_hflip: Option<bool>,
    /// One color draw (jitter factors, order and both coin flips) shared by
    /// the two views of a pair.
    pub uni_color: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub hflip_prob: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_min_area: 0.2,
            crop_aspect: [3.0 / 4.0, 4.0 / 3.0],
            enable_color_jitter: true,
            enable_grayscale: true,
            enable_hflip: None,
            uni_color: false,
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            hue: 0.2,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            hflip_prob: 0.5,
        }
    }
}

impl AugConfig {
    /// Crop/resize only.
    pub fn crop_only() -> Self {
        Self {
            enable_color_jitter: false,
            enable_grayscale: false,
            ..Self::default()
        }
    }

    /// No augmentation at all.
    pub fn identity() -> Self {
        Self {
            crop_min_area: 1.0,
            crop_aspect: [1.0, 1.0],
            enable_hflip: Some(false),
            ..Self::crop_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if !(self.crop_min_area > 0.0 && self.crop_min_area <= 1.0) {
            return bad("crop_min_area must be in (0, 1]");
        }
        let [lo, hi] = self.crop_aspect;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("crop_aspect must satisfy 0 < lo <= hi");
        }
        for p in [self.jitter_prob, self.grayscale_prob, self.hflip_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must be in [0, 1]");
            }
        }
        if self.brightness < 0.0 || self.contrast < 0.0 || self.saturation < 0.0 {
            return bad("jitter strengths must be non-negative");
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return bad("hue must be in [0, 0.5]");
        }
        Ok(())
    }

    pub fn hflip_for(&self, style: DatasetStyle) -> bool {
        self.enable_hflip.unwrap_or(style == DatasetStyle::Pose)
    }
}

/// Crop window in source pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift as a fraction of a full turn.
    pub hue: f64,
    pub order: [JitterOp; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorParams {
    /// `None` when the jitter coin came up tails or jitter is disabled.
    pub jitter: Option<JitterParams>,
    pub grayscale: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewParams {
    pub crop: CropBox,
    pub flipped: bool,
    pub color: ColorParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    /// `size × size × 3`, row-major, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub params: ViewParams,
}

fn sample_crop(cfg: &AugConfig, size: usize, rng: &mut impl Rng) -> CropBox {
    let s = size as f64;
    let area = s * s;
    let [alo, ahi] = cfg.crop_aspect;
    for _ in 0..CROP_ATTEMPTS {
        let target = area * sample_range(rng, cfg.crop_min_area, 1.0);
        let ratio = sample_range(rng, alo.ln(), ahi.ln()).exp();
        let w = (target * ratio).sqrt();
        let h = (target / ratio).sqrt();
        if w <= s && h <= s {
            return CropBox {
                x0: sample_range(rng, 0.0, s - w),
                y0: sample_range(rng, 0.0, s - h),
                width: w,
                height: h,
            };
        }
    }
    CropBox {
        x0: 0.0,
        y0: 0.0,
        width: s,
        height: s,
    }
}

fn sample_range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn sample_color(cfg: &AugConfig, rng: &mut impl Rng) -> ColorParams {
    let jitter = if cfg.enable_color_jitter && rng.gen_bool(cfg.jitter_prob) {
        let factor = |rng: &mut _, s: f64| sample_range(rng, (1.0 - s).max(0.0), 1.0 + s);
        let brightness = factor(rng, cfg.brightness);
        let contrast = factor(rng, cfg.contrast);
        let saturation = factor(rng, cfg.saturation);
        let hue = sample_range(rng, -cfg.hue, cfg.hue);
        let mut order = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue];
        order.shuffle(rng);
        Some(JitterParams {
            brightness,
            contrast,
            saturation,
            hue,
            order,
        })
    } else {
        None
    };
    let grayscale = cfg.enable_grayscale && rng.gen_bool(cfg.grayscale_prob);
    ColorParams { jitter, grayscale }
}

fn sample_geometry(cfg: &AugConfig, style: DatasetStyle, size: usize, rng: &mut impl Rng) -> (CropBox, bool) {
    let crop = sample_crop(cfg, size, rng);
    let flipped = cfg.hflip_for(style) && rng.gen_bool(cfg.hflip_prob);
    (crop, flipped)
}

/// Draws every parameter for one view.
pub fn sample_view_params(cfg: &AugConfig, style: DatasetStyle, size: usize, rng: &mut impl Rng) -> ViewParams {
    let (crop, flipped) = sample_geometry(cfg, style, size, rng);
    let color = sample_color(cfg, rng);
    ViewParams { crop, flipped, color }
}

/// Applies already-drawn parameters to a `size × size × 3` image.
pub fn apply_view(image: &[f32], size: usize, params: &ViewParams) -> Vec<f32> {
    let mut out = resized_crop(image, size, &params.crop, params.flipped);
    if let Some(j) = &params.color.jitter {
        for op in j.order {
            match op {
                JitterOp::Brightness => scale(&mut out, j.brightness as f32),
                JitterOp::Contrast => contrast(&mut out, j.contrast as f32),
                JitterOp::Saturation => saturate(&mut out, j.saturation as f32),
                JitterOp::Hue => hue_shift(&mut out, j.hue as f32),
            }
        }
    }
    if params.color.grayscale {
        for px in out.chunks_exact_mut(3) {
            let g = luma(px);
            px.fill(g);
        }
    }
    out
}

pub fn augment_view(
    image: &[f32],
    size: usize,
    cfg: &AugConfig,
    style: DatasetStyle,
    rng: &mut impl Rng,
) -> AugmentedView {
    let params = sample_view_params(cfg, style, size, rng);
    AugmentedView {
        pixels: apply_view(image, size, &params),
        params,
    }
}

/// Augments two images. Geometry is always drawn independently; the color
/// draw is shared when `uni_color` is set.
pub fn augment_pair(
    a: &[f32],
    b: &[f32],
    size: usize,
    cfg: &AugConfig,
    style: DatasetStyle,
    rng: &mut impl Rng,
) -> (AugmentedView, AugmentedView) {
    let pa = sample_view_params(cfg, style, size, rng);
    let pb = if cfg.uni_color {
        let (crop, flipped) = sample_geometry(cfg, style, size, rng);
        ViewParams {
            crop,
            flipped,
            color: pa.color,
        }
    } else {
        sample_view_params(cfg, style, size, rng)
    };
    (
        AugmentedView {
            pixels: apply_view(a, size, &pa),
            params: pa,
        },
        AugmentedView {
            pixels: apply_view(b, size, &pb),
            params: pb,
        },
    )
}

/// Bilinear resample of the crop back to `size × size` with half-pixel
/// centers, so the full-image crop is an exact identity.
fn resized_crop(image: &[f32], size: usize, crop: &CropBox, flipped: bool) -> Vec<f32> {
    let s = size as f64;
    let (sx, sy) = (crop.width / s, crop.height / s);
    let last = (size - 1) as f64;
    let mut out = vec![0.0f32; size * size * 3];
    for oy in 0..size {
        let fy = (crop.y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, last);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(size - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..size {
            let src_x = if flipped { size - 1 - ox } else { ox };
            let fx = (crop.x0 + (src_x as f64 + 0.5) * sx - 0.5).clamp(0.0, last);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(size - 1);
            let wx = (fx - x0 as f64) as f32;
            let o = (oy * size + ox) * 3;
            for c in 0..3 {
                let p = |y: usize, x: usize| image[(y * size + x) * 3 + c];
                let top = p(y0, x0) + wx * (p(y0, x1) - p(y0, x0));
                let bot = p(y1, x0) + wx * (p(y1, x1) - p(y1, x0));
                out[o + c] = top + wy * (bot - top);
            }
        }
    }
    out
}

fn luma(px: &[f32]) -> f32 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

fn scale(img: &mut [f32], f: f32) {
    img.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
}

fn contrast(img: &mut [f32], f: f32) {
    let n = (img.len() / 3) as f32;
    let mean = img.chunks_exact(3).map(luma).sum::<f32>() / n;
    img.iter_mut()
        .for_each(|v| *v = (f * *v + (1.0 - f) * mean).clamp(0.0, 1.0));
}

fn saturate(img: &mut [f32], f: f32) {
    for px in img.chunks_exact_mut(3) {
        let g = luma(px);
        px.iter_mut()
            .for_each(|v| *v = (f * *v + (1.0 - f) * g).clamp(0.0, 1.0));
    }
}

fn hue_shift(img: &mut [f32], shift: f32) {
    for px in img.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        px.copy_from_slice(&[r, g, b]);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    if d <= 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h / 6.0, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use proptest::prelude::*;

    fn noise(size: usize, seed: u64) -> Vec<f32> {
        let mut rng = rng_for(&[seed]);
        (0..size * size * 3).map(|_| rand::Rng::gen::<f32>(&mut rng)).collect()
    }

    #[test]
    fn identity_config_is_identity() {
        let img = noise(16, 1);
        let out = augment_view(&img, 16, &AugConfig::identity(), DatasetStyle::Yaw, &mut rng_for(&[2]));
        assert_eq!(out.pixels, img);
    }

    #[test]
    fn same_seed_same_output() {
        let img = noise(20, 3);
        let cfg = AugConfig {
            enable_hflip: Some(true),
            ..Default::default()
        };
        let a = augment_view(&img, 20, &cfg, DatasetStyle::Yaw, &mut rng_for(&[9]));
        let b = augment_view(&img, 20, &cfg, DatasetStyle::Yaw, &mut rng_for(&[9]));
        assert_eq!(a, b);
    }

    #[test]
    fn forced_grayscale_equalizes_channels() {
        let cfg = AugConfig {
            grayscale_prob: 1.0,
            ..Default::default()
        };
        for seed in 0..20 {
            let img = noise(16, seed);
            let out = augment_view(&img, 16, &cfg, DatasetStyle::Yaw, &mut rng_for(&[seed, 1]));
            for px in out.pixels.chunks_exact(3) {
                assert!(px[0] == px[1] && px[1] == px[2]);
            }
        }
    }

    #[test]
    fn uni_color_shares_the_color_draw() {
        let cfg = AugConfig {
            uni_color: true,
            ..Default::default()
        };
        let (a, b) = (noise(16, 1), noise(16, 2));
        for seed in 0..50 {
            let (va, vb) = augment_pair(&a, &b, 16, &cfg, DatasetStyle::Yaw, &mut rng_for(&[seed]));
            assert_eq!(va.params.color, vb.params.color);
        }
    }

    #[test]
    fn independent_color_draws_differ() {
        let cfg = AugConfig {
            jitter_prob: 1.0,
            ..Default::default()
        };
        let img = noise(16, 1);
        let differing = (0..100)
            .filter(|&seed| {
                let (va, vb) = augment_pair(&img, &img, 16, &cfg, DatasetStyle::Yaw, &mut rng_for(&[seed]));
                va.params.color.jitter.unwrap().brightness != vb.params.color.jitter.unwrap().brightness
            })
            .count();
        assert_eq!(differing, 100);
    }

    #[test]
    fn crop_only_pair_has_no_color_change() {
        let img = noise(16, 4);
        let (va, vb) = augment_pair(&img, &img, 16, &AugConfig::crop_only(), DatasetStyle::Yaw, &mut rng_for(&[0]));
        for v in [va, vb] {
            assert_eq!(v.params.color, ColorParams { jitter: None, grayscale: false });
            assert!(!v.params.flipped);
        }
    }

    #[test]
    fn hflip_default_follows_style() {
        let cfg = AugConfig::default();
        assert!(!cfg.hflip_for(DatasetStyle::Yaw));
        assert!(cfg.hflip_for(DatasetStyle::Pose));
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = noise(8, 5);
        let params = ViewParams {
            crop: CropBox { x0: 0.0, y0: 0.0, width: 8.0, height: 8.0 },
            flipped: true,
            color: ColorParams { jitter: None, grayscale: false },
        };
        let out = apply_view(&img, 8, &params);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    assert_eq!(out[(y * 8 + x) * 3 + c], img[(y * 8 + 7 - x) * 3 + c]);
                }
            }
        }
    }

    #[test]
    fn hsv_round_trip() {
        for seed in 0..50 {
            let px = noise(1, seed);
            let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r, g, b) = hsv_to_rgb(h, s, v);
            assert!((r - px[0]).abs() < 1e-5 && (g - px[1]).abs() < 1e-5 && (b - px[2]).abs() < 1e-5);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = AugConfig { crop_min_area: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = AugConfig { grayscale_prob: -0.1, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn outputs_stay_in_unit_range(seed in any::<u64>(), min_area in 0.05f64..1.0, uni in any::<bool>()) {
            let cfg = AugConfig {
                crop_min_area: min_area,
                uni_color: uni,
                jitter_prob: 1.0,
                enable_hflip: Some(true),
                ..Default::default()
            };
            let img = noise(16, seed);
            let (a, b) = augment_pair(&img, &img, 16, &cfg, DatasetStyle::Yaw, &mut rng_for(&[seed]));
            for v in a.pixels.iter().chain(&b.pixels) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
