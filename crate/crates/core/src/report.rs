//! Plot-ready JSON reports. Serialization is deterministic, so equal
//! inputs give byte-identical files.

use serde::{Deserialize, Serialize};

use crate::evaluation::{
    cumulative_error_curve, error_by_keypoint_count, uncertainty_cross_correlation,
    uncertainty_error_correlation, uncertainty_grid, CrossCorrelation, CurvePoint, Evaluation,
    KeypointGroup,
};
use crate::geometry::Mae;
use crate::laeo::{evaluate_laeo, LaeoFrame, LaeoMetrics, LaeoResult, UncertaintyGate};
use crate::losses::LossKind;
use crate::model::ModelConfig;
use crate::training::{evaluate_split, train_with, EpochRecord, LabeledInput, TrainConfig};
use crate::Result;

/// Thresholds in the cumulative error curve.
pub const CURVE_STEPS: usize = 50;

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(report: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(report)?;
    out.push(b'\n');
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mae: Mae,
    /// Uncertainties below are raw log-variances `s`; `σ = exp(s/2)`.
    pub uncertainty_unit: String,
    pub cumulative_curve: Vec<CurvePoint>,
    /// Absent when a log-variance series is constant (heads without uncertainty).
    pub uncertainty_correlations: Option<CrossCorrelation>,
    pub uncertainty_error_correlation: Option<f64>,
    pub keypoint_groups: Vec<KeypointGroup>,
}

pub fn eval_report(evaluation: &Evaluation) -> Result<EvalReport> {
    let records = &evaluation.records;
    let grid = uncertainty_grid(records, CURVE_STEPS);
    Ok(EvalReport {
        samples: records.len(),
        mae: evaluation.mae,
        uncertainty_unit: "log_variance".into(),
        cumulative_curve: cumulative_error_curve(records, &grid)?,
        uncertainty_correlations: uncertainty_cross_correlation(records).ok(),
        uncertainty_error_correlation: uncertainty_error_correlation(records).ok(),
        keypoint_groups: error_by_keypoint_count(records),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub loss: LossKind,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub mae: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub epochs: usize,
    pub alpha: f64,
    /// MSE, COMB, UNC in that order; errors on the validation split.
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Fixed-width text table, one row per loss.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<6}{:>9}{:>9}{:>9}{:>9}\n",
            "loss", "yaw", "pitch", "roll", "MAE"
        );
        for r in &self.rows {
            s += &format!(
                "{:<6}{:>9.2}{:>9.2}{:>9.2}{:>9.2}\n",
                r.loss.name().to_uppercase(),
                r.yaw,
                r.pitch,
                r.roll,
                r.mae
            );
        }
        s
    }
}

/// Trains one model per loss on the same split and seed and tabulates the
/// validation errors of each best snapshot. `on_epoch` sees every epoch.
pub fn run_ablation<F>(
    model_config: &ModelConfig,
    train_set: &[LabeledInput],
    val_set: &[LabeledInput],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<AblationReport>
where
    F: FnMut(LossKind, &EpochRecord),
{
    let mut rows = Vec::with_capacity(LossKind::ALL.len());
    for kind in LossKind::ALL {
        let cfg = TrainConfig {
            loss_kind: kind,
            ..config.clone()
        };
        let (params, history) =
            train_with(model_config, train_set, val_set, &cfg, |e| on_epoch(kind, e))?;
        let (_, mae) = evaluate_split(&params, val_set, kind, cfg.comb_alpha)?;
        rows.push(AblationRow {
            loss: kind,
            yaw: mae.yaw,
            pitch: mae.pitch,
            roll: mae.roll,
            mae: mae.overall,
            best_epoch: history.best().map_or(0, |b| b.epoch),
        });
    }
    Ok(AblationReport {
        seed: config.seed,
        epochs: config.epochs,
        alpha: model_config.alpha,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaeoReport {
    pub tau: f64,
    pub frames: usize,
    /// Every head trusted.
    pub baseline: LaeoMetrics,
    pub gate: UncertaintyGate,
    pub with_uncertainty: LaeoMetrics,
}

/// Per-pair output line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLine {
    pub frame_id: String,
    #[serde(flatten)]
    pub result: LaeoResult,
    pub baseline_value: f64,
    pub baseline_is_laeo: bool,
    pub labelled_laeo: bool,
}

/// Scores the frames with and without the uncertainty gate.
pub fn laeo_report(
    frames: &[LaeoFrame],
    tau: f64,
    gate: UncertaintyGate,
) -> Result<(LaeoReport, Vec<PairLine>)> {
    let (base_pairs, baseline) = evaluate_laeo(frames, tau, &UncertaintyGate::baseline())?;
    let (gated_pairs, with_uncertainty) = evaluate_laeo(frames, tau, &gate)?;
    let mut lines = Vec::new();
    for ((frame, gated), base) in frames.iter().zip(gated_pairs).zip(base_pairs) {
        for (result, b) in gated.into_iter().zip(base) {
            lines.push(PairLine {
                frame_id: frame.frame_id.clone(),
                labelled_laeo: frame.is_labelled_laeo(&result.pair.0, &result.pair.1),
                baseline_value: b.laeo_value,
                baseline_is_laeo: b.is_laeo,
                result,
            });
        }
    }
    Ok((
        LaeoReport {
            tau,
            frames: frames.len(),
            baseline,
            gate,
            with_uncertainty,
        },
        lines,
    ))
}
