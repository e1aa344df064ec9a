//! Euler-angle conventions and angular metrics.
//!
//! Coordinate frame: `x` points image-right, `y` points image-down and `z`
//! points from the head towards the camera. A head at the zero pose faces
//! the camera (+z).
//!
//! The rotation of a pose is `R = Rx(pitch) · Ry(yaw) · Rz(roll)`. With this
//! composition the image-plane projection of the facing direction `R·ẑ` is
//! exactly `(sin yaw, −cos yaw · sin pitch)`, the end-point used by the LAEO
//! detector.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Head orientation in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerPose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerPose {
    pub const fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Brings the angles into yaw ∈ [−180, 180), pitch ∈ [−90, 90],
    /// roll ∈ [−180, 180) without changing the rotation.
    ///
    /// Pitch outside ±90° is folded with the identity
    /// `(y, p, r) ≡ (180 − y, p + 180, r + 180)`, which leaves both
    /// [`rotation_matrix`] and [`project_direction`] unchanged.
    pub fn canonical(self) -> Self {
        let mut yaw = wrap_degrees(self.yaw);
        let mut pitch = wrap_degrees(self.pitch);
        let mut roll = wrap_degrees(self.roll);
        if pitch.abs() > 90.0 {
            yaw = wrap_degrees(180.0 - yaw);
            pitch = wrap_degrees(pitch + 180.0);
            roll = wrap_degrees(roll + 180.0);
        }
        Self { yaw, pitch, roll }
    }
}

/// Wraps an angle into [−180, 180).
pub fn wrap_degrees(deg: f64) -> f64 {
    let w = (deg + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can return 360.0 for tiny negative inputs
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// End-point of the head direction on the image plane (`y` grows downward).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlaneVector {
    pub x: f64,
    pub y: f64,
}

impl PlaneVector {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }
}

/// Projects the facing direction of `pose` onto the image plane:
/// `(sin yaw, −cos yaw · sin pitch)`. Roll is ignored.
pub fn project_direction(pose: EulerPose) -> PlaneVector {
    let (sy, cy) = pose.yaw.to_radians().sin_cos();
    let sp = pose.pitch.to_radians().sin();
    PlaneVector::new(sy, -cy * sp)
}

pub type Matrix3 = [[f64; 3]; 3];

pub fn matmul3(a: &Matrix3, b: &Matrix3) -> Matrix3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose3(a: &Matrix3) -> Matrix3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn det3(a: &Matrix3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn apply3(m: &Matrix3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Rotation about the vertical (image-down) axis; maps +z towards +x for positive yaw.
fn rot_yaw(deg: f64) -> Matrix3 {
    let (s, c) = deg.to_radians().sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// Rotation about the lateral axis; maps +z towards −y (up on screen) for positive pitch.
fn rot_pitch(deg: f64) -> Matrix3 {
    let (s, c) = deg.to_radians().sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

/// Rotation about the frontal axis.
fn rot_roll(deg: f64) -> Matrix3 {
    let (s, c) = deg.to_radians().sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// `Rx(pitch) · Ry(yaw) · Rz(roll)`.
pub fn rotation_matrix(pose: EulerPose) -> Matrix3 {
    matmul3(
        &rot_pitch(pose.pitch),
        &matmul3(&rot_yaw(pose.yaw), &rot_roll(pose.roll)),
    )
}

/// Per-angle absolute errors in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AngleErrors {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl AngleErrors {
    pub fn to_array(self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }

    /// Mean of the three components ("overall" error of one sample).
    pub fn mean(self) -> f64 {
        (self.yaw + self.pitch + self.roll) / 3.0
    }
}

/// Plain absolute difference per angle; no wraparound.
pub fn angular_error(pred: EulerPose, gt: EulerPose) -> AngleErrors {
    AngleErrors {
        yaw: (pred.yaw - gt.yaw).abs(),
        pitch: (pred.pitch - gt.pitch).abs(),
        roll: (pred.roll - gt.roll).abs(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mae {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    /// Mean of the three per-angle MAEs.
    pub overall: f64,
}

pub fn mae(errors: &[AngleErrors]) -> Result<Mae> {
    if errors.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let n = errors.len() as f64;
    let mut sum = [0.0; 3];
    for e in errors {
        for (s, v) in sum.iter_mut().zip(e.to_array()) {
            *s += v;
        }
    }
    let [yaw, pitch, roll] = sum.map(|s| s / n);
    Ok(Mae {
        yaw,
        pitch,
        roll,
        overall: (yaw + pitch + roll) / 3.0,
    })
}
