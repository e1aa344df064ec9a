//! Parametric 3D head used as a ground-truth keypoint generator.
//!
//! A rigid five-landmark head is rotated by a known pose, projected
//! orthographically into a virtual image and perturbed with Gaussian noise
//! whose standard deviation grows with |yaw|. Far-side ears are marked
//! missing beyond a yaw threshold, mimicking self-occlusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{apply3, rotation_matrix, EulerPose};
use crate::keypoints::{drop_keypoints, Keypoint, KeypointSet, Landmark, N_KEYPOINTS};
use crate::{Error, Result, Sample};

/// Landmark positions in head-local units (inter-ocular distance 1), same
/// axes as [`crate::geometry`]: x image-right, y image-down, z towards the
/// camera at the zero pose. The subject's left side is at +x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalHead {
    pub points: [[f64; 3]; N_KEYPOINTS],
}

impl Default for CanonicalHead {
    fn default() -> Self {
        Self {
            points: [
                [0.0, 0.45, 0.55],    // nose
                [0.5, 0.0, 0.0],      // left eye
                [-0.5, 0.0, 0.0],     // right eye
                [0.95, 0.15, -0.85],  // left ear
                [-0.95, 0.15, -0.85], // right ear
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Pixels.
    pub base_sigma: f64,
    /// Pixels per degree of |yaw|.
    pub yaw_gain: f64,
    /// Beyond this |yaw| (degrees) the far ear is not detected.
    pub occlusion_yaw: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::noiseless()
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            base_sigma: 0.0,
            yaw_gain: 0.0,
            occlusion_yaw: 60.0,
        }
    }

    pub fn heteroscedastic(base_sigma: f64, yaw_gain: f64) -> Self {
        Self {
            base_sigma,
            yaw_gain,
            occlusion_yaw: 60.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_sigma >= 0.0 && self.yaw_gain >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise parameters must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    /// Per-coordinate standard deviation in pixels at `pose`.
    pub fn sigma(&self, pose: EulerPose) -> f64 {
        self.base_sigma + self.yaw_gain * pose.yaw.abs()
    }
}

/// Where the head lands in the virtual image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageFrame {
    /// Pixel position of the head origin.
    pub center: (f64, f64),
    /// Pixels per head unit.
    pub scale: f64,
}

impl Default for ImageFrame {
    fn default() -> Self {
        Self {
            center: (320.0, 240.0),
            scale: 60.0,
        }
    }
}

/// Noise-free projection of the rotated head: pixel positions and the
/// rotated depth of each landmark.
pub fn project_head(
    head: &CanonicalHead,
    pose: EulerPose,
    frame: ImageFrame,
) -> [(f64, f64, f64); N_KEYPOINTS] {
    let r = rotation_matrix(pose);
    head.points.map(|p| {
        let q = apply3(&r, p);
        (
            frame.center.0 + frame.scale * q[0],
            frame.center.1 + frame.scale * q[1],
            q[2],
        )
    })
}

/// Ear hidden behind the head at `pose`, if any.
pub fn occluded_ear(head: &CanonicalHead, pose: EulerPose, noise: &NoiseModel) -> Option<Landmark> {
    if pose.yaw.abs() <= noise.occlusion_yaw {
        return None;
    }
    let proj = project_head(head, pose, ImageFrame::default());
    let (l, r) = (Landmark::LeftEar, Landmark::RightEar);
    Some(if proj[l.index()].2 < proj[r.index()].2 { l } else { r })
}

/// Generates one sample in a given image frame.
pub fn generate_sample_in<R: Rng + ?Sized>(
    head: &CanonicalHead,
    pose: EulerPose,
    noise: &NoiseModel,
    frame: ImageFrame,
    rng: &mut R,
) -> KeypointSet {
    let sigma = noise.sigma(pose);
    let gauss = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let hidden = occluded_ear(head, pose, noise);
    let proj = project_head(head, pose, frame);
    let mut points = [Keypoint::default(); N_KEYPOINTS];
    for (i, (p, &(x, y, _))) in points.iter_mut().zip(&proj).enumerate() {
        let (nx, ny) = if sigma > 0.0 {
            (gauss.sample(rng), gauss.sample(rng))
        } else {
            (0.0, 0.0)
        };
        // uniform on (0.5, 1]
        let c = 1.0 - rng.random_range(0.0..0.5);
        let c = if hidden.map(Landmark::index) == Some(i) { 0.0 } else { c };
        *p = Keypoint::new(x + nx, y + ny, c);
    }
    KeypointSet { points }
}

/// Generates one sample at a random image position; returns keypoints and
/// the ground-truth pose.
pub fn generate_sample<R: Rng + ?Sized>(
    pose: EulerPose,
    noise: &NoiseModel,
    rng: &mut R,
) -> (KeypointSet, EulerPose) {
    let frame = ImageFrame {
        center: (rng.random_range(100.0..540.0), rng.random_range(100.0..380.0)),
        ..ImageFrame::default()
    };
    (
        generate_sample_in(&CanonicalHead::default(), pose, noise, frame, rng),
        pose,
    )
}

/// Uniform ranges (degrees) for each angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    pub yaw: (f64, f64),
    pub pitch: (f64, f64),
    pub roll: (f64, f64),
}

impl Default for PoseDistribution {
    fn default() -> Self {
        Self {
            yaw: (-75.0, 75.0),
            pitch: (-60.0, 60.0),
            roll: (-30.0, 30.0),
        }
    }
}

impl PoseDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> EulerPose {
        let draw = |rng: &mut R, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        EulerPose::new(
            draw(rng, self.yaw),
            draw(rng, self.pitch),
            draw(rng, self.roll),
        )
    }

    fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.yaw, self.pitch, self.roll] {
            if !(lo <= hi && lo >= -99.0 && hi <= 99.0) {
                return Err(Error::InvalidArgument(format!(
                    "pose range ({lo}, {hi}) must be ordered and within ±99°"
                )));
            }
        }
        Ok(())
    }
}

/// `n` i.i.d. samples with ids `synth-000000`, `synth-000001`, ...
pub fn generate_dataset(
    n: usize,
    poses: &PoseDistribution,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    poses.validate()?;
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let pose = poses.sample(&mut rng);
            let (keypoints, pose) = generate_sample(pose, noise, &mut rng);
            Sample {
                id: format!("synth-{i:06}"),
                keypoints,
                pose: Some(pose),
            }
        })
        .collect())
}

/// Randomly drops keypoints from a fraction of the samples, keeping a
/// uniformly drawn count in `keep` (clamped to the points present).
pub fn with_random_drops(
    samples: &[Sample],
    fraction: f64,
    keep: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<Sample>> {
    if *keep.start() == 0 || keep.is_empty() {
        return Err(Error::InvalidArgument(format!("invalid keep range {keep:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            if rng.random_bool(fraction.clamp(0.0, 1.0)) {
                let present = s.keypoints.present_count();
                let k = rng.random_range(keep.clone()).min(present);
                if k > 0 {
                    out.keypoints = drop_keypoints(&s.keypoints, k, &mut rng)?;
                }
            }
            Ok(out)
        })
        .collect()
}

/// Random multi-person frame for LAEO experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaeoFrameConfig {
    pub heads: usize,
    /// Pairs constructed to look at each other (at most `heads / 2`).
    pub mutual_pairs: usize,
    /// Image size in pixels.
    pub width: f64,
    pub height: f64,
    pub min_separation: f64,
    /// Range of every head's log-variances.
    pub log_var: (f64, f64),
    /// Unlabelled pairs must score below `tau - margin` without gating.
    pub tau: f64,
    pub margin: f64,
}

impl Default for LaeoFrameConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            mutual_pairs: 1,
            width: 640.0,
            height: 480.0,
            min_separation: 40.0,
            log_var: (0.5, 6.0),
            tau: crate::laeo::DEFAULT_TAU,
            margin: 0.05,
        }
    }
}

/// Pose whose projected direction is `m · d` for a unit image vector `d`.
fn pose_towards<R: Rng + ?Sized>(d: (f64, f64), m: f64, rng: &mut R) -> EulerPose {
    let yaw = (m * d.0).asin();
    let pitch = (-m * d.1 / yaw.cos()).clamp(-1.0, 1.0).asin();
    EulerPose::new(yaw.to_degrees(), pitch.to_degrees(), rng.random_range(-30.0..30.0))
}

/// A frame whose first `2 * mutual_pairs` heads face each other in pairs
/// (labelled LAEO) while the rest look in random directions. Frames where an
/// unlabelled pair would score within `margin` of `tau` are redrawn, so the
/// labels are separable by the ungated score.
pub fn generate_laeo_frame<R: Rng + ?Sized>(
    frame_id: &str,
    config: &LaeoFrameConfig,
    rng: &mut R,
) -> Result<crate::laeo::LaeoFrame> {
    use crate::geometry::project_direction;
    use crate::laeo::{score_frame, HeadInstance, LaeoFrame, UncertaintyGate};
    use crate::model::PoseEstimate;

    if 2 * config.mutual_pairs > config.heads || config.log_var.0 > config.log_var.1 {
        return Err(Error::InvalidArgument(format!("invalid LAEO frame config {config:?}")));
    }
    let poses = PoseDistribution::default();
    for _ in 0..10_000 {
        let mut centroids: Vec<(f64, f64)> = Vec::with_capacity(config.heads);
        while centroids.len() < config.heads {
            let c = (rng.random_range(0.0..config.width), rng.random_range(0.0..config.height));
            if centroids
                .iter()
                .all(|p| (p.0 - c.0).hypot(p.1 - c.1) >= config.min_separation)
            {
                centroids.push(c);
            }
        }
        let mut pose_list = Vec::with_capacity(config.heads);
        for k in 0..config.mutual_pairs {
            let (a, b) = (centroids[2 * k], centroids[2 * k + 1]);
            let n = (b.0 - a.0).hypot(b.1 - a.1);
            let d = ((b.0 - a.0) / n, (b.1 - a.1) / n);
            pose_list.push(pose_towards(d, rng.random_range(0.5..0.95), rng));
            pose_list.push(pose_towards((-d.0, -d.1), rng.random_range(0.5..0.95), rng));
        }
        while pose_list.len() < config.heads {
            let p = poses.sample(rng);
            if project_direction(p).norm() > 0.2 {
                pose_list.push(p);
            }
        }
        let (lo, hi) = config.log_var;
        let mut draw_s = || if hi > lo { rng.random_range(lo..hi) } else { lo };
        let heads: Vec<HeadInstance> = centroids
            .iter()
            .zip(&pose_list)
            .enumerate()
            .map(|(i, (&centroid, &pose))| HeadInstance {
                id: format!("h{i}"),
                centroid,
                estimate: PoseEstimate {
                    pose,
                    log_var: [draw_s(), draw_s(), draw_s()],
                },
            })
            .collect();
        let laeo_pairs: Vec<(String, String)> = (0..config.mutual_pairs)
            .map(|k| (format!("h{}", 2 * k), format!("h{}", 2 * k + 1)))
            .collect();
        let frame = LaeoFrame {
            frame_id: frame_id.to_string(),
            heads,
            laeo_pairs,
        };
        let scores = score_frame(&frame.heads, &UncertaintyGate::baseline(), config.tau)?;
        let separable = scores.iter().all(|r| {
            frame.is_labelled_laeo(&r.pair.0, &r.pair.1) || r.laeo_value < config.tau - config.margin
        });
        if separable {
            return Ok(frame);
        }
    }
    Err(Error::Degenerate("could not place a separable LAEO frame".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::normalize;

    #[test]
    fn zero_pose_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frame = ImageFrame::default();
        let s = generate_sample_in(
            &CanonicalHead::default(),
            EulerPose::default(),
            &NoiseModel::noiseless(),
            frame,
            &mut rng,
        );
        assert!(s.points.iter().all(|p| p.c > 0.5 && p.c <= 1.0));
        let cx = frame.center.0;
        for l in Landmark::ALL {
            let (a, b) = (s.get(l), s.get(l.mirror()));
            assert!(((a.x1 - cx) + (b.x1 - cx)).abs() < 1e-9);
            assert!((a.x2 - b.x2).abs() < 1e-9);
        }
        // nose below the eyes in the image
        assert!(s.get(Landmark::Nose).x2 > s.get(Landmark::LeftEye).x2);
    }

    #[test]
    fn far_ear_is_occluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = NoiseModel::noiseless();
        let (s, _) = generate_sample(EulerPose::new(75.0, 0.0, 0.0), &noise, &mut rng);
        assert_eq!(s.present_count(), 4);
        // facing +x: the subject's left ear (at +x) swings away from the camera
        assert_eq!(s.get(Landmark::LeftEar).c, 0.0);
        let (s, _) = generate_sample(EulerPose::new(-75.0, 10.0, 5.0), &noise, &mut rng);
        assert_eq!(s.get(Landmark::RightEar).c, 0.0);
        let (s, _) = generate_sample(EulerPose::new(55.0, 0.0, 0.0), &noise, &mut rng);
        assert_eq!(s.present_count(), 5);
    }

    #[test]
    fn noise_variance_matches_model() {
        let noise = NoiseModel::heteroscedastic(0.5, 0.05);
        let pose = EulerPose::new(40.0, -10.0, 5.0);
        let sigma = noise.sigma(pose);
        assert!((sigma - 2.5).abs() < 1e-12);
        let head = CanonicalHead::default();
        let frame = ImageFrame::default();
        let clean = project_head(&head, pose, frame);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sq = 0.0;
        let mut n = 0.0;
        for _ in 0..10_000 {
            let s = generate_sample_in(&head, pose, &noise, frame, &mut rng);
            for (p, c) in s.points.iter().zip(&clean) {
                sq += (p.x1 - c.0).powi(2) + (p.x2 - c.1).powi(2);
                n += 2.0;
            }
        }
        let var = sq / n;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn mirror_symmetry() {
        let head = CanonicalHead::default();
        let frame = ImageFrame::default();
        let pose = EulerPose::new(35.0, 20.0, -12.0);
        let mirrored = EulerPose::new(-35.0, 20.0, 12.0);
        let a = project_head(&head, pose, frame);
        let b = project_head(&head, mirrored, frame);
        let cx = frame.center.0;
        for l in Landmark::ALL {
            let (p, q) = (a[l.index()], b[l.mirror().index()]);
            assert!(((p.0 - cx) + (q.0 - cx)).abs() < 1e-9);
            assert!((p.1 - q.1).abs() < 1e-9);
        }
    }

    /// Distance between two normalized keypoint layouts.
    fn layout_distance(a: &KeypointSet, b: &KeypointSet) -> f64 {
        let (na, nb) = (normalize(a).unwrap(), normalize(b).unwrap());
        (0..5)
            .map(|i| (na.x1[i] - nb.x1[i]).powi(2) + (na.x2[i] - nb.x2[i]).powi(2))
            .sum()
    }

    #[test]
    fn zero_noise_pose_is_recoverable_by_grid_search() {
        let head = CanonicalHead::default();
        let noise = NoiseModel::noiseless();
        let render = |pose: EulerPose| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            generate_sample_in(&head, pose, &noise, ImageFrame::default(), &mut rng)
        };
        for truth in [
            EulerPose::new(30.0, -20.0, 10.0),
            EulerPose::new(-50.0, 35.0, -5.0),
            EulerPose::new(5.0, 45.0, 20.0),
        ] {
            let observed = render(truth);
            let search = |centre: EulerPose, half: f64, step: f64| {
                let n = (half / step).round() as i32;
                let mut best = (f64::INFINITY, centre);
                for i in -n..=n {
                    for j in -n..=n {
                        for k in -n..=n {
                            let p = EulerPose::new(
                                centre.yaw + i as f64 * step,
                                centre.pitch + j as f64 * step,
                                centre.roll + k as f64 * step,
                            );
                            let d = layout_distance(&render(p), &observed);
                            if d < best.0 {
                                best = (d, p);
                            }
                        }
                    }
                }
                best.1
            };
            let coarse = search(EulerPose::default(), 60.0, 5.0);
            let fine = search(coarse, 5.0, 0.5);
            assert!((fine.yaw - truth.yaw).abs() <= 0.5, "{fine:?} vs {truth:?}");
            assert!((fine.pitch - truth.pitch).abs() <= 0.5, "{fine:?} vs {truth:?}");
        }
    }

    #[test]
    fn dataset_generation() {
        let d = PoseDistribution::default();
        let noise = NoiseModel::noiseless();
        let a = generate_dataset(1, &d, &noise, 3).unwrap();
        let b = generate_dataset(1, &d, &noise, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].id, "synth-000000");
        assert!(generate_dataset(0, &d, &noise, 3).is_err());
        let bad = PoseDistribution { yaw: (-120.0, 120.0), ..d };
        assert!(generate_dataset(5, &bad, &noise, 3).is_err());
        assert!(generate_dataset(5, &d, &NoiseModel::heteroscedastic(-1.0, 0.0), 3).is_err());

        let big = generate_dataset(10_000, &d, &noise, 4).unwrap();
        let mean_yaw = big.iter().map(|s| s.pose.unwrap().yaw).sum::<f64>() / 10_000.0;
        assert!(mean_yaw.abs() < 2.0, "{mean_yaw}");
        assert!(big.iter().all(|s| s.keypoints.present_count() >= 4));
    }

    #[test]
    fn random_drops() {
        let d = generate_dataset(500, &PoseDistribution::default(), &NoiseModel::noiseless(), 5).unwrap();
        let dropped = with_random_drops(&d, 1.0, 2..=2, 6).unwrap();
        assert!(dropped.iter().all(|s| s.keypoints.present_count() == 2));
        let none = with_random_drops(&d, 0.0, 2..=5, 6).unwrap();
        assert_eq!(none, d);
        assert!(with_random_drops(&d, 0.5, 0..=3, 6).is_err());
    }

    #[test]
    fn laeo_frames_are_separable() {
        use crate::laeo::{evaluate_laeo, UncertaintyGate};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = LaeoFrameConfig { heads: 5, mutual_pairs: 2, ..Default::default() };
        let frames: Vec<_> = (0..30)
            .map(|i| generate_laeo_frame(&format!("f{i}"), &cfg, &mut rng).unwrap())
            .collect();
        for f in &frames {
            assert_eq!(f.heads.len(), 5);
            assert_eq!(f.laeo_pairs.len(), 2);
        }
        let (_, m) = evaluate_laeo(&frames, cfg.tau, &UncertaintyGate::baseline()).unwrap();
        assert_eq!((m.precision, m.recall, m.average_precision), (1.0, 1.0, 1.0));
        assert_eq!(m.true_positives, 60);
        let bad = LaeoFrameConfig { heads: 3, mutual_pairs: 2, ..Default::default() };
        assert!(generate_laeo_frame("x", &bad, &mut rng).is_err());
    }
}
