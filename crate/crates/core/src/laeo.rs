//! Fast "looking at each other" detection.
//!
//! For heads A and B with image centroids `c_A`, `c_B` and projected
//! directions `h_A`, `h_B`, let `u = c_B − c_A`. The pair scores
//! `cos α_A = u·h_A / (|u||h_A|)` and `cos α_B = −u·h_B / (|u||h_B|)`, each
//! kept only if its head's yaw/pitch uncertainty passes the gate, and the
//! LAEO value is the weighted mean of the surviving cosines.

use serde::{Deserialize, Serialize};

use crate::geometry::{project_direction, PlaneVector};
use crate::model::PoseEstimate;
use crate::{Error, Result};

/// Default uncertainty gate on the mean yaw/pitch log-variance.
pub const DEFAULT_DELTA: f64 = 7.0;
/// Default decision threshold on the LAEO value.
pub const DEFAULT_TAU: f64 = 0.93;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadInstance {
    pub id: String,
    /// Pixels, `y` downward.
    pub centroid: (f64, f64),
    pub estimate: PoseEstimate,
}

/// Interval accepted by the uncertainty gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInterval {
    /// `[0, δ]`.
    #[default]
    Closed,
    /// `(−∞, δ]`: confident estimates with negative log-variance pass too.
    UpperOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyGate {
    pub delta: f64,
    pub interval: GateInterval,
}

impl Default for UncertaintyGate {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            interval: GateInterval::Closed,
        }
    }
}

impl UncertaintyGate {
    /// A gate that never rejects: the plain geometric method.
    pub fn baseline() -> Self {
        Self {
            delta: f64::INFINITY,
            interval: GateInterval::UpperOnly,
        }
    }

    pub fn weight(&self, estimate: &PoseEstimate) -> u8 {
        uncertainty_weight(estimate.log_var[0], estimate.log_var[1], self)
    }
}

/// 1 if `½(s_y + s_p)` lies in the gate interval, else 0. Roll is ignored
/// because it does not move the projected direction.
pub fn uncertainty_weight(s_yaw: f64, s_pitch: f64, gate: &UncertaintyGate) -> u8 {
    let s = 0.5 * (s_yaw + s_pitch);
    let lower_ok = match gate.interval {
        GateInterval::Closed => s >= 0.0,
        GateInterval::UpperOnly => true,
    };
    u8::from(lower_ok && s <= gate.delta)
}

/// `(cos α_A, cos α_B)` for the pair.
pub fn interaction_measure(a: &HeadInstance, b: &HeadInstance) -> Result<(f64, f64)> {
    let u = PlaneVector::new(b.centroid.0 - a.centroid.0, b.centroid.1 - a.centroid.1);
    let un = u.norm();
    if !(un > 0.0) {
        return Err(Error::Degenerate(format!(
            "heads '{}' and '{}' share a centroid",
            a.id, b.id
        )));
    }
    let cosine = |h: PlaneVector, v: PlaneVector, id: &str| {
        let hn = h.norm();
        if !(hn > 0.0) {
            return Err(Error::Degenerate(format!(
                "head '{id}' has no projected direction (facing the camera)"
            )));
        }
        Ok(v.dot(h) / (un * hn))
    };
    let ha = project_direction(a.estimate.pose);
    let hb = project_direction(b.estimate.pose);
    let ca = cosine(ha, u, &a.id)?;
    let cb = cosine(hb, PlaneVector::new(-u.x, -u.y), &b.id)?;
    Ok((ca, cb))
}

/// Weighted mean of the two cosines; 0 when neither head is trusted.
pub fn laeo_value(measure: (f64, f64), weights: (u8, u8)) -> f64 {
    let (wa, wb) = (f64::from(weights.0), f64::from(weights.1));
    if wa + wb == 0.0 {
        return 0.0;
    }
    (wa * measure.0 + wb * measure.1) / (wa + wb)
}

/// Inclusive threshold.
pub fn classify(value: f64, tau: f64) -> bool {
    value >= tau
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaeoResult {
    pub pair: (String, String),
    pub cos_alpha_a: f64,
    pub cos_alpha_b: f64,
    pub w_a: u8,
    pub w_b: u8,
    pub laeo_value: f64,
    pub is_laeo: bool,
}

pub fn score_pair(
    a: &HeadInstance,
    b: &HeadInstance,
    gate: &UncertaintyGate,
    tau: f64,
) -> Result<LaeoResult> {
    let (ca, cb) = interaction_measure(a, b)?;
    let (w_a, w_b) = (gate.weight(&a.estimate), gate.weight(&b.estimate));
    let value = laeo_value((ca, cb), (w_a, w_b));
    // both untrusted: never fires, whatever tau is
    let is_laeo = (w_a + w_b > 0) && classify(value, tau);
    Ok(LaeoResult {
        pair: (a.id.clone(), b.id.clone()),
        cos_alpha_a: ca,
        cos_alpha_b: cb,
        w_a,
        w_b,
        laeo_value: value,
        is_laeo,
    })
}

/// Scores every unordered pair `(i, j)`, `i < j`, in declaration order.
pub fn score_frame(
    heads: &[HeadInstance],
    gate: &UncertaintyGate,
    tau: f64,
) -> Result<Vec<LaeoResult>> {
    let mut out = Vec::new();
    for i in 0..heads.len() {
        for j in i + 1..heads.len() {
            out.push(score_pair(&heads[i], &heads[j], gate, tau)?);
        }
    }
    Ok(out)
}

/// Heads of one frame plus the id pairs annotated as LAEO.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LaeoFrame {
    pub frame_id: String,
    pub heads: Vec<HeadInstance>,
    pub laeo_pairs: Vec<(String, String)>,
}

impl LaeoFrame {
    pub fn is_labelled_laeo(&self, a: &str, b: &str) -> bool {
        self.laeo_pairs
            .iter()
            .any(|(x, y)| (x == a && y == b) || (x == b && y == a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaeoMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub average_precision: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub pairs: usize,
}

/// Area under the precision-recall curve of ranked scores, using the
/// all-points interpolated precision. Tied scores enter as one step.
/// Returns 0 when there are no positives.
pub fn average_precision(scored: &[(f64, bool)]) -> f64 {
    let positives = scored.iter().filter(|(_, y)| *y).count();
    if positives == 0 {
        return 0.0;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new(); // (recall, precision)
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            tp += usize::from(sorted[i].1);
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / seen as f64));
    }
    // precision envelope from the right
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Scores every pair of every frame and compares with the annotations.
/// Precision (recall) is 0 when nothing is predicted (labelled) positive.
pub fn evaluate_laeo(
    frames: &[LaeoFrame],
    tau: f64,
    gate: &UncertaintyGate,
) -> Result<(Vec<Vec<LaeoResult>>, LaeoMetrics)> {
    let mut per_frame = Vec::with_capacity(frames.len());
    let mut scored = Vec::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for frame in frames {
        let results = score_frame(&frame.heads, gate, tau)?;
        for r in &results {
            let label = frame.is_labelled_laeo(&r.pair.0, &r.pair.1);
            match (r.is_laeo, label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
            scored.push((r.laeo_value, label));
        }
        per_frame.push(results);
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let metrics = LaeoMetrics {
        precision,
        recall,
        f1,
        average_precision: average_precision(&scored),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        pairs: scored.len(),
    };
    Ok((per_frame, metrics))
}
