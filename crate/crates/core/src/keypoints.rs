//! Facial keypoints and the input normalization of the network.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const N_KEYPOINTS: usize = 5;

/// Fixed slot order of the five facial keypoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Landmark {
    Nose = 0,
    LeftEye = 1,
    RightEye = 2,
    LeftEar = 3,
    RightEar = 4,
}

impl Landmark {
    pub const ALL: [Landmark; N_KEYPOINTS] = [
        Landmark::Nose,
        Landmark::LeftEye,
        Landmark::RightEye,
        Landmark::LeftEar,
        Landmark::RightEar,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The bilateral counterpart (nose maps to itself).
    pub fn mirror(self) -> Landmark {
        match self {
            Landmark::Nose => Landmark::Nose,
            Landmark::LeftEye => Landmark::RightEye,
            Landmark::RightEye => Landmark::LeftEye,
            Landmark::LeftEar => Landmark::RightEar,
            Landmark::RightEar => Landmark::LeftEar,
        }
    }
}

/// One detector keypoint in pixels; `c = 0` marks a missing point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x1: f64,
    pub x2: f64,
    pub c: f64,
}

impl Keypoint {
    pub const fn new(x1: f64, x2: f64, c: f64) -> Self {
        Self { x1, x2, c }
    }

    pub fn is_present(&self) -> bool {
        self.c > 0.0
    }
}

/// Five keypoints in [`Landmark`] order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KeypointSet {
    pub points: [Keypoint; N_KEYPOINTS],
}

impl KeypointSet {
    /// Validates confidences (in `[0, 1]`) and coordinates (finite).
    pub fn new(points: [Keypoint; N_KEYPOINTS]) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.c) {
                return Err(Error::InvalidArgument(format!(
                    "keypoint {i}: confidence {} outside [0, 1]",
                    p.c
                )));
            }
            if !p.x1.is_finite() || !p.x2.is_finite() {
                return Err(Error::NonFinite(format!("keypoint {i} coordinates")));
            }
        }
        Ok(Self { points })
    }

    pub fn get(&self, landmark: Landmark) -> Keypoint {
        self.points[landmark.index()]
    }

    pub fn present_count(&self) -> usize {
        present_count(self)
    }
}

/// Network input: centred, per-axis max-normalized coordinates plus confidences.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormalizedInput {
    pub x1: [f64; N_KEYPOINTS],
    pub x2: [f64; N_KEYPOINTS],
    pub c: [f64; N_KEYPOINTS],
}

impl NormalizedInput {
    /// Reinterprets the normalized values as a keypoint set.
    pub fn to_keypoint_set(&self) -> KeypointSet {
        let mut points = [Keypoint::default(); N_KEYPOINTS];
        for (i, p) in points.iter_mut().enumerate() {
            *p = Keypoint::new(self.x1[i], self.x2[i], self.c[i]);
        }
        KeypointSet { points }
    }
}

pub fn present_count(set: &KeypointSet) -> usize {
    set.points.iter().filter(|p| p.is_present()).count()
}

/// Centres each axis on the centroid of the present points and divides by
/// the largest absolute centred value among them. Missing points are
/// zeroed and ignored by both statistics. An axis whose present points
/// all coincide maps to zeros.
pub fn normalize(raw: &KeypointSet) -> Result<NormalizedInput> {
    let present: Vec<usize> = (0..N_KEYPOINTS)
        .filter(|&i| raw.points[i].is_present())
        .collect();
    if present.is_empty() {
        return Err(Error::NoKeypoints);
    }
    let mut out = NormalizedInput::default();
    for (i, p) in raw.points.iter().enumerate() {
        out.c[i] = p.c;
    }
    let axes: [(fn(&Keypoint) -> f64, &mut [f64; N_KEYPOINTS]); 2] =
        [(|p| p.x1, &mut out.x1), (|p| p.x2, &mut out.x2)];
    for (coord, dst) in axes {
        let n = present.len() as f64;
        let centroid = present.iter().map(|&i| coord(&raw.points[i])).sum::<f64>() / n;
        let scale = present
            .iter()
            .map(|&i| (coord(&raw.points[i]) - centroid).abs())
            .fold(0.0, f64::max);
        for &i in &present {
            dst[i] = if scale > 0.0 {
                (coord(&raw.points[i]) - centroid) / scale
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

/// Marks randomly chosen present points as missing (`c = 0`, coordinates
/// untouched) so that exactly `keep` remain.
pub fn drop_keypoints<R: Rng + ?Sized>(
    set: &KeypointSet,
    keep: usize,
    rng: &mut R,
) -> Result<KeypointSet> {
    let present: Vec<usize> = (0..N_KEYPOINTS)
        .filter(|&i| set.points[i].is_present())
        .collect();
    if keep == 0 || keep > present.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {keep} of {} present keypoints",
            present.len()
        )));
    }
    let kept: Vec<usize> = present.choose_multiple(rng, keep).copied().collect();
    let mut out = *set;
    for &i in &present {
        if !kept.contains(&i) {
            out.points[i].c = 0.0;
        }
    }
    Ok(out)
}
