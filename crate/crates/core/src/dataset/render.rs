//! Procedural orthographic ray caster for the synthetic shape families.
//!
//! Objects are unions of axis-aligned primitives in an object frame with
//! `y` up and `+z` facing the camera at yaw 0. A single directional light
//! fixed in the world frame shades a Lambertian surface over a uniform
//! background. Instances differ by part proportions, overall scale, an
//! image-plane offset and, with color nuisance on, per-part colors, the
//! background tint and the light direction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::actions::{Pose, Quat};

use super::Image;

pub const BACKGROUND: [f32; 3] = [0.92, 0.92, 0.92];
const AMBIENT: f32 = 0.35;
const LIGHT: [f64; 3] = [-0.38, 0.76, 0.53];
/// Half-width of the orthographic view volume, in object units.
const VIEW_EXTENT: f64 = 1.15;
const CAMERA_DISTANCE: f64 = 6.0;

/// Category names, index = category id. Families 1 and 3 are (close to)
/// rotationally symmetric; the others carry an asymmetric part at a fixed
/// object-frame azimuth.
pub const FAMILY_NAMES: [&str; 8] = [
    "mug", "vase", "chair", "table", "airplane", "car", "lamp", "deer",
];

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipsoid { radii: [f64; 3] },
    Cuboid { half: [f64; 3] },
    /// Axis along object `y`.
    Cylinder { radius: f64, half_height: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Primitive {
    center: [f64; 3],
    shape: Shape,
    shade: f32,
}

/// One object instance and its per-instance rendering nuisances.
#[derive(Clone, Debug)]
pub struct Object {
    parts: Vec<Primitive>,
    /// One color per part.
    colors: Vec<[f32; 3]>,
    background: [f32; 3],
    light: [f64; 3],
    /// Image-plane shift in view units.
    offset: [f64; 2],
}

fn ell(center: [f64; 3], radii: [f64; 3], shade: f32) -> Primitive {
    Primitive {
        center,
        shape: Shape::Ellipsoid { radii },
        shade,
    }
}

fn cub(center: [f64; 3], half: [f64; 3], shade: f32) -> Primitive {
    Primitive {
        center,
        shape: Shape::Cuboid { half },
        shade,
    }
}

fn cyl(center: [f64; 3], radius: f64, half_height: f64, shade: f32) -> Primitive {
    Primitive {
        center,
        shape: Shape::Cylinder {
            radius,
            half_height,
        },
        shade,
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Samples an instance of `family`. Parameters are jittered around the
/// family template; the coarse 3-D layout is shared within a family.
pub fn sample_object(family: usize, color_nuisance: bool, rng: &mut ChaCha8Rng) -> Object {
    let mut j = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    let s = j(0.7, 1.1);
    let parts = match family % FAMILY_NAMES.len() {
        0 => {
            let (r, h) = (j(0.38, 0.52), j(0.45, 0.7));
            let hy = j(-0.15, 0.15) * h;
            vec![
                cyl([0.0, 0.0, 0.0], r, h, 1.0),
                cub([r + 0.13, hy, 0.0], [0.09, 0.55 * h, 0.05], 0.8),
                cub([r + 0.05, hy + 0.5 * h, 0.0], [0.1, 0.05, 0.05], 0.8),
                cub([r + 0.05, hy - 0.5 * h, 0.0], [0.1, 0.05, 0.05], 0.8),
            ]
        }
        1 => {
            let (br, nr) = (j(0.38, 0.52), j(0.1, 0.18));
            vec![
                ell([0.0, -0.3, 0.0], [br, j(0.32, 0.45), br], 1.0),
                cyl([0.0, 0.2, 0.0], nr, j(0.2, 0.32), 0.85),
                ell([0.0, 0.52, 0.0], [nr + 0.1, 0.07, nr + 0.1], 0.7),
            ]
        }
        2 => {
            let (w, d, lh) = (j(0.32, 0.45), j(0.32, 0.45), j(0.3, 0.42));
            let bh = j(0.3, 0.45);
            let mut p = vec![
                cub([0.0, 0.0, 0.0], [w, 0.05, d], 1.0),
                cub([0.0, bh + 0.05, -d + 0.04], [w, bh, 0.04], 0.75),
            ];
            for (x, z) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
                p.push(cub([x * (w - 0.05), -lh, z * (d - 0.05)], [0.04, lh, 0.04], 0.6));
            }
            p
        }
        3 => {
            let (w, d, lh) = (j(0.6, 0.8), j(0.35, 0.5), j(0.3, 0.45));
            let mut p = vec![cub([0.0, lh, 0.0], [w, 0.05, d], 1.0)];
            for (x, z) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
                p.push(cub([x * (w - 0.07), 0.0, z * (d - 0.07)], [0.05, lh, 0.05], 0.65));
            }
            p
        }
        4 => {
            let (len, span) = (j(0.65, 0.85), j(0.65, 0.9));
            let wz = j(-0.05, 0.15);
            vec![
                ell([0.0, 0.0, 0.0], [0.12, 0.12, len], 1.0),
                cub([0.0, 0.0, wz], [span, 0.025, j(0.12, 0.2)], 0.8),
                cub([0.0, 0.18, -len + 0.12], [0.025, j(0.14, 0.22), 0.09], 0.65),
                cub([0.0, 0.02, -len + 0.1], [j(0.22, 0.32), 0.02, 0.06], 0.8),
            ]
        }
        5 => {
            let (w, l) = (j(0.3, 0.4), j(0.6, 0.75));
            let cab = j(-0.2, 0.05);
            let mut p = vec![
                cub([0.0, -0.1, 0.0], [w, j(0.12, 0.17), l], 1.0),
                cub([0.0, 0.15, cab], [w - 0.04, j(0.1, 0.15), j(0.28, 0.4)], 0.75),
            ];
            for (x, z) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
                p.push(ell([x * (w + 0.02), -0.26, z * (l - 0.2)], [0.06, 0.14, 0.14], 0.35));
            }
            p
        }
        6 => {
            let reach = j(0.25, 0.4);
            vec![
                cyl([0.0, -0.62, 0.0], j(0.25, 0.35), 0.05, 0.7),
                cyl([0.0, -0.15, 0.0], 0.04, j(0.42, 0.5), 0.6),
                cub([0.0, 0.32, reach / 2.0], [0.03, 0.03, reach / 2.0 + 0.03], 0.6),
                ell([0.0, 0.2, reach], [j(0.17, 0.25), j(0.13, 0.18), j(0.17, 0.25)], 1.0),
            ]
        }
        _ => {
            let (bl, hz) = (j(0.45, 0.6), j(0.5, 0.65));
            let mut p = vec![
                ell([0.0, 0.0, 0.0], [0.2, 0.22, bl], 1.0),
                ell([0.0, 0.3, hz - 0.1], [0.08, 0.22, 0.08], 0.9),
                ell([0.0, 0.5, hz], [0.11, 0.11, 0.18], 0.9),
                cub([0.1, 0.68, hz - 0.05], [0.02, 0.12, 0.02], 0.5),
                cub([-0.1, 0.68, hz - 0.05], [0.02, 0.12, 0.02], 0.5),
            ];
            let lz = bl - 0.15;
            for (x, z) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
                p.push(cub([x * 0.11, -0.42, z * lz], [0.04, 0.25, 0.04], 0.7));
            }
            p
        }
    };
    let parts: Vec<Primitive> = parts
        .into_iter()
        .map(|mut p| {
            p.center = p.center.map(|c| c * s);
            p.shape = match p.shape {
                Shape::Ellipsoid { radii } => Shape::Ellipsoid {
                    radii: radii.map(|r| r * s),
                },
                Shape::Cuboid { half } => Shape::Cuboid {
                    half: half.map(|h| h * s),
                },
                Shape::Cylinder {
                    radius,
                    half_height,
                } => Shape::Cylinder {
                    radius: radius * s,
                    half_height: half_height * s,
                },
            };
            p
        })
        .collect();
    let offset = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.1..0.1)];
    let (colors, background, light) = if color_nuisance {
        let colors = parts
            .iter()
            .map(|_| hsv_to_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.3..0.9), rng.gen_range(0.5..0.95)))
            .collect();
        let background = hsv_to_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.35), rng.gen_range(0.6..0.95));
        let light = [
            LIGHT[0] + rng.gen_range(-0.4..0.4),
            LIGHT[1],
            LIGHT[2] + rng.gen_range(-0.3..0.3),
        ];
        (colors, background, light)
    } else {
        (vec![[0.6, 0.6, 0.6]; parts.len()], BACKGROUND, LIGHT)
    };
    Object {
        parts,
        colors,
        background,
        light,
        offset,
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    a.map(|v| v / n)
}

/// Nearest positive hit of the ray `o + t d` on `p`: `(t, normal)`.
fn intersect(p: &Primitive, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let rel = [o[0] - p.center[0], o[1] - p.center[1], o[2] - p.center[2]];
    match p.shape {
        Shape::Ellipsoid { radii } => {
            let o2 = [rel[0] / radii[0], rel[1] / radii[1], rel[2] / radii[2]];
            let d2 = [d[0] / radii[0], d[1] / radii[1], d[2] / radii[2]];
            let a = dot(d2, d2);
            let b = 2.0 * dot(o2, d2);
            let c = dot(o2, o2) - 1.0;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if t <= 0.0 {
                return None;
            }
            let h = [rel[0] + t * d[0], rel[1] + t * d[1], rel[2] + t * d[2]];
            let n = normalize([
                h[0] / (radii[0] * radii[0]),
                h[1] / (radii[1] * radii[1]),
                h[2] / (radii[2] * radii[2]),
            ]);
            Some((t, n))
        }
        Shape::Cuboid { half } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            let mut sign = 1.0;
            for i in 0..3 {
                if d[i].abs() < 1e-12 {
                    if rel[i].abs() > half[i] {
                        return None;
                    }
                    continue;
                }
                let ta = (-half[i] - rel[i]) / d[i];
                let tb = (half[i] - rel[i]) / d[i];
                let (near, far) = if ta < tb { (ta, tb) } else { (tb, ta) };
                if near > t0 {
                    t0 = near;
                    axis = i;
                    sign = -d[i].signum();
                }
                t1 = t1.min(far);
            }
            if t0 > t1 || t0 <= 0.0 {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = sign;
            Some((t0, n))
        }
        Shape::Cylinder {
            radius,
            half_height,
        } => {
            let mut best: Option<(f64, [f64; 3])> = None;
            let a = d[0] * d[0] + d[2] * d[2];
            if a > 1e-12 {
                let b = 2.0 * (rel[0] * d[0] + rel[2] * d[2]);
                let c = rel[0] * rel[0] + rel[2] * rel[2] - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    let y = rel[1] + t * d[1];
                    if t > 0.0 && y.abs() <= half_height {
                        let hx = rel[0] + t * d[0];
                        let hz = rel[2] + t * d[2];
                        best = Some((t, [hx / radius, 0.0, hz / radius]));
                    }
                }
            }
            if d[1].abs() > 1e-12 {
                for cap in [half_height, -half_height] {
                    let t = (cap - rel[1]) / d[1];
                    if t <= 0.0 || best.is_some_and(|(bt, _)| bt <= t) {
                        continue;
                    }
                    let hx = rel[0] + t * d[0];
                    let hz = rel[2] + t * d[2];
                    if hx * hx + hz * hz <= radius * radius {
                        best = Some((t, [0.0, cap.signum(), 0.0]));
                    }
                }
            }
            best
        }
    }
}

/// Orthographic camera looking at the origin.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    /// World-to-camera extrinsics; camera axes are x right, y down, z forward.
    pub pose: Pose,
}

impl Camera {
    /// Camera on a sphere around the origin at `azimuth` (about world `y`,
    /// 0 = on the `+z` axis) and `elevation` above the horizon, optionally
    /// rolled a quarter turn about its viewing axis.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, rolled: bool) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let center = [
            CAMERA_DISTANCE * el.cos() * az.sin(),
            CAMERA_DISTANCE * el.sin(),
            CAMERA_DISTANCE * el.cos() * az.cos(),
        ];
        let fwd = normalize(center.map(|c| -c));
        let right = normalize([
            fwd[1] * 0.0 - fwd[2] * 1.0,
            fwd[2] * 0.0 - fwd[0] * 0.0,
            fwd[0] * 1.0 - fwd[1] * 0.0,
        ]);
        let down = [
            fwd[1] * right[2] - fwd[2] * right[1],
            fwd[2] * right[0] - fwd[0] * right[2],
            fwd[0] * right[1] - fwd[1] * right[0],
        ];
        let (right, down) = if rolled {
            (down, right.map(|v| -v))
        } else {
            (right, down)
        };
        let rotation = Quat::from_matrix(&[right, down, fwd]);
        Self {
            pose: Pose::from_center(rotation, center),
        }
    }
}

/// Renders `object` turned by `object_yaw_deg` about the vertical axis, seen
/// by `camera`, with 2×2 supersampling.
pub fn render(object: &Object, object_yaw_deg: f64, camera: &Camera, size: usize) -> Image {
    let m = camera.pose.rotation.to_matrix();
    let (right, down, fwd) = (m[0], m[1], m[2]);
    let center = camera.pose.center();
    let (sy, cy) = (-object_yaw_deg.to_radians()).sin_cos();
    // World → object: rotate by −yaw about y.
    let to_obj = |v: [f64; 3]| [cy * v[0] + sy * v[2], v[1], -sy * v[0] + cy * v[2]];
    let dir = to_obj(fwd);
    let light = normalize(object.light);
    let mut data = Vec::with_capacity(size * size * 3);
    const SUB: [f64; 2] = [0.25, 0.75];
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f32; 3];
            for sy_ in SUB {
                for sx_ in SUB {
                    let u = ((px as f64 + sx_) / size as f64 * 2.0 - 1.0) * VIEW_EXTENT - object.offset[0];
                    let v = ((py as f64 + sy_) / size as f64 * 2.0 - 1.0) * VIEW_EXTENT - object.offset[1];
                    let o = [
                        center[0] + u * right[0] + v * down[0],
                        center[1] + u * right[1] + v * down[1],
                        center[2] + u * right[2] + v * down[2],
                    ];
                    let o = to_obj(o);
                    let hit = object
                        .parts
                        .iter()
                        .zip(&object.colors)
                        .filter_map(|(p, c)| intersect(p, o, dir).map(|(t, n)| (t, n, p.shade, c)))
                        .min_by(|a, b| a.0.total_cmp(&b.0));
                    let rgb = match hit {
                        None => object.background,
                        Some((_, n_obj, shade, color)) => {
                            // Object → world: rotate by +yaw.
                            let n = [
                                cy * n_obj[0] - sy * n_obj[2],
                                n_obj[1],
                                sy * n_obj[0] + cy * n_obj[2],
                            ];
                            let lambert = dot(n, light).max(0.0) as f32;
                            let k = shade * (AMBIENT + (1.0 - AMBIENT) * lambert);
                            color.map(|c| (c * k).clamp(0.0, 1.0))
                        }
                    };
                    for c in 0..3 {
                        acc[c] += rgb[c] / 4.0;
                    }
                }
            }
            for a in acc {
                data.push((a * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image { size, data }
}
