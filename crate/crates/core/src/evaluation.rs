//! Accuracy metrics and uncertainty studies over a labelled dataset.

use serde::{Deserialize, Serialize};

use crate::geometry::{angular_error, mae, AngleErrors, EulerPose, Mae};
use crate::keypoints::{normalize, NormalizedInput};
use crate::model::{ModelParams, PoseEstimate};
use crate::{Error, Result, Sample};

const PREDICT_CHUNK: usize = 1024;

/// Anything that maps normalized inputs to pose estimates.
pub trait PosePredictor {
    fn predict_batch(&self, inputs: &[NormalizedInput]) -> Result<Vec<PoseEstimate>>;
}

impl PosePredictor for ModelParams {
    fn predict_batch(&self, inputs: &[NormalizedInput]) -> Result<Vec<PoseEstimate>> {
        self.predict(inputs)
    }
}

impl<F> PosePredictor for F
where
    F: Fn(&[NormalizedInput]) -> Result<Vec<PoseEstimate>>,
{
    fn predict_batch(&self, inputs: &[NormalizedInput]) -> Result<Vec<PoseEstimate>> {
        self(inputs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub estimate: PoseEstimate,
    pub ground_truth: EulerPose,
    pub present_keypoints: usize,
    /// Mean of the three log-variances.
    pub mean_uncertainty: f64,
}

impl EvalRecord {
    pub fn errors(&self) -> AngleErrors {
        angular_error(self.estimate.pose, self.ground_truth)
    }

    /// Mean of the three absolute angle errors.
    pub fn overall_error(&self) -> f64 {
        self.errors().mean()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mae: Mae,
    pub records: Vec<EvalRecord>,
}

/// Predicts every sample and aggregates the per-angle MAE.
pub fn evaluate<P: PosePredictor + ?Sized>(predictor: &P, dataset: &[Sample]) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut records = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(PREDICT_CHUNK) {
        let inputs = chunk
            .iter()
            .map(|s| normalize(&s.keypoints))
            .collect::<Result<Vec<_>>>()?;
        let preds = predictor.predict_batch(&inputs)?;
        if preds.len() != chunk.len() {
            return Err(Error::Shape(format!(
                "predictor returned {} estimates for {} inputs",
                preds.len(),
                chunk.len()
            )));
        }
        for (s, estimate) in chunk.iter().zip(preds) {
            let ground_truth = s.pose.ok_or_else(|| {
                Error::InvalidArgument(format!("sample '{}' has no ground-truth pose", s.id))
            })?;
            records.push(EvalRecord {
                estimate,
                ground_truth,
                present_keypoints: s.keypoints.present_count(),
                mean_uncertainty: estimate.mean_log_var(),
            });
        }
    }
    let errors: Vec<AngleErrors> = records.iter().map(EvalRecord::errors).collect();
    Ok(Evaluation {
        mae: mae(&errors)?,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    /// Mean overall error of the retained records; `None` when nothing is retained.
    pub mean_error: Option<f64>,
    pub retained: f64,
    pub count: usize,
}

/// For each threshold `u`, the mean overall error of the records whose
/// mean uncertainty is at most `u`, and the fraction of records retained.
pub fn cumulative_error_curve(records: &[EvalRecord], grid: &[f64]) -> Result<Vec<CurvePoint>> {
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidArgument("uncertainty grid must be ascending".into()));
    }
    let mut pairs: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.mean_uncertainty, r.overall_error()))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = records.len();
    let mut out = Vec::with_capacity(grid.len());
    let (mut k, mut sum) = (0, 0.0);
    for &u in grid {
        while k < n && pairs[k].0 <= u {
            sum += pairs[k].1;
            k += 1;
        }
        out.push(CurvePoint {
            threshold: u,
            mean_error: (k > 0).then(|| sum / k as f64),
            retained: if n == 0 { 0.0 } else { k as f64 / n as f64 },
            count: k,
        });
    }
    Ok(out)
}

/// Evenly spaced thresholds spanning the observed mean uncertainties.
pub fn uncertainty_grid(records: &[EvalRecord], steps: usize) -> Vec<f64> {
    let (lo, hi) = records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.mean_uncertainty), hi.max(r.mean_uncertainty))
    });
    if records.is_empty() || steps == 0 {
        return Vec::new();
    }
    if steps == 1 || hi == lo {
        return vec![hi];
    }
    (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect()
}

/// Sample Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs two equal-length series of at least 2 values ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossCorrelation {
    pub yaw_pitch: f64,
    pub yaw_roll: f64,
    pub pitch_roll: f64,
}

/// Pairwise Pearson correlation of the three log-variance series.
pub fn uncertainty_cross_correlation(records: &[EvalRecord]) -> Result<CrossCorrelation> {
    let series = |i: usize| -> Vec<f64> { records.iter().map(|r| r.estimate.log_var[i]).collect() };
    let (y, p, r) = (series(0), series(1), series(2));
    Ok(CrossCorrelation {
        yaw_pitch: pearson(&y, &p)?,
        yaw_roll: pearson(&y, &r)?,
        pitch_roll: pearson(&p, &r)?,
    })
}

/// Pearson correlation between mean log-variance and overall error.
pub fn uncertainty_error_correlation(records: &[EvalRecord]) -> Result<f64> {
    let u: Vec<f64> = records.iter().map(|r| r.mean_uncertainty).collect();
    let e: Vec<f64> = records.iter().map(EvalRecord::overall_error).collect();
    pearson(&u, &e)
}

/// Box-plot summary; quartiles use linear interpolation between order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile of sorted data by linear interpolation at `(n − 1)·p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointGroup {
    pub present_keypoints: usize,
    pub error: BoxStats,
    pub uncertainty: BoxStats,
}

/// Overall-error and mean-uncertainty statistics per number of present
/// keypoints, ascending. Counts with no records are omitted.
pub fn error_by_keypoint_count(records: &[EvalRecord]) -> Vec<KeypointGroup> {
    (1..=crate::keypoints::N_KEYPOINTS)
        .filter_map(|k| {
            let group: Vec<&EvalRecord> =
                records.iter().filter(|r| r.present_keypoints == k).collect();
            let err: Vec<f64> = group.iter().map(|r| r.overall_error()).collect();
            let unc: Vec<f64> = group.iter().map(|r| r.mean_uncertainty).collect();
            Some(KeypointGroup {
                present_keypoints: k,
                error: BoxStats::from_values(&err)?,
                uncertainty: BoxStats::from_values(&unc)?,
            })
        })
        .collect()
}
