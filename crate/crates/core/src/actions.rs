//! Pose algebra and the action vector connecting two frames of a clip.
//!
//! Yaw-style clips encode the rotation between two views as the sine and
//! cosine of the wrapped yaw difference. Pose-style (ego-motion) clips
//! encode the relative camera rotation as a canonical unit quaternion, the
//! translation between camera centers expressed in the earlier camera's
//! frame, and a per-clip orientation flag.
//!
//! Extrinsics are world-to-camera: `x_cam = R · x_world + t`, so the camera
//! center is `c = -Rᵀ t`. The relative rotation is `R_rel = R_t' · R_tᵀ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on input quaternion norms for relative-pose extraction.
pub const POSE_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetStyle {
    Yaw,
    Pose,
}

impl DatasetStyle {
    /// Length of [`Action::flat`] for this style.
    pub fn action_dim(self) -> usize {
        match self {
            DatasetStyle::Yaw => 2,
            DatasetStyle::Pose => 8,
        }
    }
}

/// Unit quaternion `(w, x, y, z)`, Hamilton convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle_rad: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (s, c) = (angle_rad / 2.0).sin_cos();
        Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self ⊗ rhs` (apply `rhs` first).
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let (a, b) = (self, rhs);
        Quat::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Picks the representative with `w > 0`; when `w == 0` the first
    /// nonzero vector component is made positive.
    pub fn canonical(&self) -> Quat {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else {
            [self.x, self.y, self.z]
                .into_iter()
                .find(|&v| v != 0.0)
                .is_some_and(|v| v < 0.0)
        };
        if flip {
            Quat::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            *self
        }
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let Quat { w, x, y, z } = *self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Shepperd's method: branch on the largest of `trace` and the
    /// diagonal to keep the square root well conditioned.
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Quat {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > m[0][0] && tr > m[1][1] && tr > m[2][2] {
            let s = (1.0 + tr).sqrt() * 2.0;
            Quat::new(
                s / 4.0,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quat::new(
                (m[2][1] - m[1][2]) / s,
                s / 4.0,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quat::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                s / 4.0,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quat::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                s / 4.0,
            )
        };
        q.normalized().canonical()
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let m = self.to_matrix();
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }
}

/// World-to-camera extrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Quat::IDENTITY,
            translation: [0.0; 3],
        }
    }

    /// Pose of a camera at world position `center` with orientation
    /// `rotation` (world-to-camera).
    pub fn from_center(rotation: Quat, center: [f64; 3]) -> Self {
        let rc = rotation.rotate(center);
        Self {
            rotation,
            translation: [-rc[0], -rc[1], -rc[2]],
        }
    }

    /// `c = -Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        let c = self.rotation.conjugate().rotate(self.translation);
        [-c[0], -c[1], -c[2]]
    }
}

/// The action `a_{t,t'}` applied between two views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "snake_case")]
pub enum Action {
    Yaw {
        sin: f64,
        cos: f64,
    },
    Pose {
        rotation: Quat,
        translation: [f64; 3],
        orientation_flag: u8,
    },
}

impl Action {
    pub fn style(&self) -> DatasetStyle {
        match self {
            Action::Yaw { .. } => DatasetStyle::Yaw,
            Action::Pose { .. } => DatasetStyle::Pose,
        }
    }

    /// Fixed-length numeric encoding: `[sin, cos]` or
    /// `[qw, qx, qy, qz, tx, ty, tz, flag]`.
    pub fn flat(&self) -> Vec<f64> {
        match *self {
            Action::Yaw { sin, cos } => vec![sin, cos],
            Action::Pose {
                rotation: q,
                translation: t,
                orientation_flag,
            } => vec![q.w, q.x, q.y, q.z, t[0], t[1], t[2], orientation_flag as f64],
        }
    }

    /// Rotation angle encoded by a yaw action, in degrees in `(-180, 180]`.
    pub fn yaw_degrees(&self) -> Option<f64> {
        match *self {
            Action::Yaw { sin, cos } => Some(sin.atan2(cos).to_degrees()),
            Action::Pose { .. } => None,
        }
    }
}

/// Wraps an angle difference in degrees to `(-180, 180]`.
pub fn wrap_degrees(delta: f64) -> f64 {
    let d = delta.rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Yaw action from `yaw_t` to `yaw_t2` (degrees in `[0, 360)`).
pub fn yaw_action(yaw_t: f64, yaw_t2: f64) -> Action {
    let delta = wrap_degrees(yaw_t2 - yaw_t).to_radians();
    let (sin, cos) = delta.sin_cos();
    Action::Yaw { sin, cos }
}

fn check_unit(q: &Quat, which: &str) -> Result<()> {
    let n = q.norm();
    if (n - 1.0).abs() > POSE_NORM_TOLERANCE {
        return Err(Error::Pose(format!(
            "{which} rotation quaternion has norm {n:.6}, expected 1"
        )));
    }
    Ok(())
}

/// Relative camera motion from `pose_t` to `pose_t2`.
///
/// The rotation is `q_t' ⊗ q_t⁻¹` canonicalized to `w ≥ 0`; the translation
/// is the displacement of the camera center, `R_t · (c_t' − c_t)`, i.e.
/// expressed in the first camera's frame.
pub fn relative_pose_action(pose_t: &Pose, pose_t2: &Pose, orientation_flag: u8) -> Result<Action> {
    check_unit(&pose_t.rotation, "first")?;
    check_unit(&pose_t2.rotation, "second")?;
    if orientation_flag > 1 {
        return Err(Error::Pose(format!(
            "orientation flag must be 0 or 1, got {orientation_flag}"
        )));
    }
    let q1 = pose_t.rotation.normalized();
    let q2 = pose_t2.rotation.normalized();
    let rotation = q2.mul(&q1.conjugate()).normalized().canonical();
    let (c1, c2) = (pose_t.center(), pose_t2.center());
    let translation = q1.rotate([c2[0] - c1[0], c2[1] - c1[1], c2[2] - c1[2]]);
    Ok(Action::Pose {
        rotation,
        translation,
        orientation_flag,
    })
}

/// Per-component mean and standard deviation of flat action vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this count as zero variance.
const ZERO_VARIANCE: f64 = 1e-12;

impl ActionStats {
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Validation("no action vectors to summarize".into()))?;
        let dim = first.len();
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape("action vectors of differing length".into()));
        }
        let n = vectors.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for v in vectors {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Z-scores the flat action; zero-variance components map to 0.
pub fn normalize_action(action: &Action, stats: &ActionStats) -> Result<Vec<f64>> {
    normalize_flat(&action.flat(), stats)
}

pub fn normalize_flat(flat: &[f64], stats: &ActionStats) -> Result<Vec<f64>> {
    if flat.len() != stats.dim() || stats.std.len() != stats.dim() {
        return Err(Error::Shape(format!(
            "action has {} components, stats have {}",
            flat.len(),
            stats.dim()
        )));
    }
    Ok(flat
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(x, (m, s))| if *s < ZERO_VARIANCE { 0.0 } else { (x - m) / s })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn yaw_identity_and_quarter_turn() {
        assert_eq!(yaw_action(37.0, 37.0), Action::Yaw { sin: 0.0, cos: 1.0 });
        let Action::Yaw { sin, cos } = yaw_action(0.0, 90.0) else { unreachable!() };
        assert!(close(sin, 1.0, 1e-15) && close(cos, 0.0, 1e-15));
    }

    #[test]
    fn yaw_wraps_across_zero() {
        // 350 − 10 = 340° wraps to −20°.
        let Action::Yaw { sin, cos } = yaw_action(10.0, 350.0) else { unreachable!() };
        assert!(close(sin, -0.342_020_143_325_668_7, 1e-12));
        assert!(close(cos, 0.939_692_620_785_908_4, 1e-12));
    }

    #[test]
    fn wrap_keeps_half_turn_positive() {
        assert_eq!(wrap_degrees(180.0), 180.0);
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_eq!(wrap_degrees(190.0), -170.0);
    }

    #[test]
    fn identical_poses_give_identity_action() {
        let p = Pose::from_center(
            Quat::from_axis_angle([0.3, -1.0, 0.2], 1.1),
            [0.5, 2.0, -3.0],
        );
        let Action::Pose {
            rotation,
            translation,
            orientation_flag,
        } = relative_pose_action(&p, &p, 1).unwrap()
        else {
            unreachable!()
        };
        assert!(close(rotation.w, 1.0, 1e-12));
        assert!(rotation.x.abs() < 1e-12 && rotation.y.abs() < 1e-12 && rotation.z.abs() < 1e-12);
        assert!(translation.iter().all(|t| t.abs() < 1e-12));
        assert_eq!(orientation_flag, 1);
    }

    #[test]
    fn quarter_turn_about_z() {
        let a = Pose::identity();
        let b = Pose::from_center(Quat::from_axis_angle([0.0, 0.0, 1.0], 90f64.to_radians()), [0.0; 3]);
        let Action::Pose { rotation, translation, .. } = relative_pose_action(&a, &b, 0).unwrap() else {
            unreachable!()
        };
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(rotation.w, h, 1e-12) && close(rotation.z, h, 1e-12));
        assert!(rotation.x.abs() < 1e-12 && rotation.y.abs() < 1e-12);
        assert!(translation.iter().all(|t| t.abs() < 1e-12));
    }

    #[test]
    fn translation_is_center_shift_in_first_camera_frame() {
        // First camera rotated 90° about y; moving the center along world +x
        // shows up along the camera's own axis R·x.
        let r = Quat::from_axis_angle([0.0, 1.0, 0.0], 90f64.to_radians());
        let a = Pose::from_center(r, [0.0, 0.0, 0.0]);
        let b = Pose::from_center(r, [1.0, 0.0, 0.0]);
        let Action::Pose { translation, .. } = relative_pose_action(&a, &b, 0).unwrap() else {
            unreachable!()
        };
        let expect = r.rotate([1.0, 0.0, 0.0]);
        for i in 0..3 {
            assert!(close(translation[i], expect[i], 1e-12));
        }
    }

    #[test]
    fn non_unit_quaternion_is_rejected() {
        let mut p = Pose::identity();
        p.rotation = Quat::new(0.9, 0.0, 0.0, 0.0);
        assert!(matches!(
            relative_pose_action(&p, &Pose::identity(), 0),
            Err(Error::Pose(_))
        ));
    }

    #[test]
    fn canonical_tie_break_on_zero_w() {
        let q = Quat::new(0.0, 0.0, -1.0, 0.0).canonical();
        assert_eq!(q.as_array(), [0.0, 0.0, 1.0, 0.0]);
        let q = Quat::new(-0.0, 0.6, -0.8, 0.0).canonical();
        assert_eq!(q.y, -0.8);
    }

    #[test]
    fn normalization_rules() {
        let stats = ActionStats {
            mean: vec![0.0, 5.0, 1.0],
            std: vec![2.0, 1.0, 0.0],
        };
        let v = normalize_flat(&[3.0, 5.0, 7.0], &stats).unwrap();
        assert_eq!(v, vec![1.5, 0.0, 0.0]);
        assert!(normalize_flat(&[1.0, 2.0], &stats).is_err());
    }

    #[test]
    fn stats_of_constant_component_have_zero_std() {
        let s = ActionStats::from_vectors(&[vec![1.0, 2.0], vec![1.0, 4.0]]).unwrap();
        assert_eq!(s.mean, vec![1.0, 3.0]);
        assert_eq!(s.std, vec![0.0, 1.0]);
        let a = Action::Yaw { sin: 1.0, cos: 3.0 };
        assert_eq!(normalize_action(&a, &s).unwrap(), vec![0.0, 0.0]);
    }
}
