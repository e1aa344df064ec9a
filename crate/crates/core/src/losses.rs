//! Training objectives.
//!
//! - [`l_hhp`]: heteroscedastic loss, per angle `½·exp(−s)·(q − f)² + ½·s`.
//! - [`l_mse`]: sum of squared angle residuals.
//! - [`l_comb`]: per-angle bin cross-entropy plus `α·(q − f)²`.
//!
//! All angles are in degrees. [`batch_loss`] averages a loss over a batch of
//! head outputs and returns its gradient with respect to those outputs, so it
//! can be attached to an autodiff graph with
//! [`Graph::external_scalar`](crate::autodiff::Graph::external_scalar).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::geometry::EulerPose;
use crate::model::PoseEstimate;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    /// `(l_y, l_p, l_r)`.
    pub per_angle: [f64; 3],
}

impl LossValue {
    fn from_terms(per_angle: [f64; 3]) -> Self {
        Self {
            total: per_angle.iter().sum(),
            per_angle,
        }
    }
}

/// Uniform angle bins for the classification part of [`l_comb`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    pub n_bins: usize,
    /// Degrees.
    pub bin_width: f64,
    /// Lower edge of the first bin, degrees.
    pub lower: f64,
}

impl Default for BinningScheme {
    /// 66 bins of 3° over [−99°, 99°].
    fn default() -> Self {
        Self {
            n_bins: 66,
            bin_width: 3.0,
            lower: -99.0,
        }
    }
}

impl BinningScheme {
    /// `n_bins` bins of 3° centred on zero.
    pub fn with_bins(n_bins: usize) -> Self {
        let bin_width = 3.0;
        Self {
            n_bins,
            bin_width,
            lower: -(n_bins as f64) * bin_width / 2.0,
        }
    }

    pub fn upper(&self) -> f64 {
        self.lower + self.n_bins as f64 * self.bin_width
    }

    /// Bin containing `angle`; the upper edge belongs to the last bin.
    pub fn bin_index(&self, angle: f64) -> Result<usize> {
        let (lo, hi) = (self.lower, self.upper());
        if !(angle >= lo && angle <= hi) {
            return Err(Error::OutOfBinRange { angle, lo, hi });
        }
        let i = ((angle - lo) / self.bin_width).floor() as usize;
        Ok(i.min(self.n_bins - 1))
    }
}

pub fn l_hhp(pred: &PoseEstimate, gt: EulerPose) -> LossValue {
    let f = pred.pose.to_array();
    let q = gt.to_array();
    let mut terms = [0.0; 3];
    for i in 0..3 {
        let r = q[i] - f[i];
        let s = pred.log_var[i];
        terms[i] = 0.5 * (-s).exp() * r * r + 0.5 * s;
    }
    LossValue::from_terms(terms)
}

pub fn l_mse(pred: EulerPose, gt: EulerPose) -> LossValue {
    let f = pred.to_array();
    let q = gt.to_array();
    LossValue::from_terms(std::array::from_fn(|i| (q[i] - f[i]).powi(2)))
}

/// Numerically stable `log Σ exp(z)`.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `logits` holds `3 × n_bins` scores: yaw bins, then pitch, then roll.
pub fn l_comb(
    pred: EulerPose,
    logits: &[f64],
    gt: EulerPose,
    alpha: f64,
    bins: &BinningScheme,
) -> Result<LossValue> {
    if logits.len() != 3 * bins.n_bins {
        return Err(Error::Shape(format!(
            "expected {} logits, got {}",
            3 * bins.n_bins,
            logits.len()
        )));
    }
    let f = pred.to_array();
    let q = gt.to_array();
    let mut terms = [0.0; 3];
    for i in 0..3 {
        let z = &logits[i * bins.n_bins..(i + 1) * bins.n_bins];
        let target = bins.bin_index(q[i])?;
        let ce = log_sum_exp(z) - z[target];
        terms[i] = ce + alpha * (q[i] - f[i]).powi(2);
    }
    Ok(LossValue::from_terms(terms))
}

/// Largest per-angle gap between [`l_hhp`] and the Gaussian negative
/// log-likelihood with `σ² = exp(s)`, once its constant `½·log 2π` is removed.
pub fn nll_equivalence_check(pred: &PoseEstimate, gt: EulerPose) -> f64 {
    let hhp = l_hhp(pred, gt).per_angle;
    let f = pred.pose.to_array();
    let q = gt.to_array();
    (0..3)
        .map(|i| {
            let var = pred.log_var[i].exp();
            let r = q[i] - f[i];
            let nll = r * r / (2.0 * var) + 0.5 * var.ln() + 0.5 * (2.0 * PI).ln();
            (hhp[i] - (nll - 0.5 * (2.0 * PI).ln())).abs()
        })
        .fold(0.0, f64::max)
}

/// Which objective a model is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Heteroscedastic loss with learned log-variances.
    Unc,
    Mse,
    Comb,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Mse, LossKind::Comb, LossKind::Unc];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Unc => "UNC",
            LossKind::Mse => "MSE",
            LossKind::Comb => "COMB",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unc" => Ok(LossKind::Unc),
            "mse" => Ok(LossKind::Mse),
            "comb" => Ok(LossKind::Comb),
            other => Err(Error::InvalidArgument(format!("unknown loss '{other}'"))),
        }
    }
}

/// Batch-mean loss and its gradient with respect to the head outputs.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub value: LossValue,
    pub grad_head: Tensor,
    pub grad_bins: Option<Tensor>,
}

/// Mean loss over a batch of raw head outputs.
///
/// `head` is `[B, 6]` for [`LossKind::Unc`] and `[B, 3]` otherwise; `bins`
/// (`[B, 3·n_bins]`) is required for [`LossKind::Comb`].
pub fn batch_loss(
    kind: LossKind,
    head: &Tensor,
    bins: Option<(&Tensor, &BinningScheme)>,
    targets: &[EulerPose],
    comb_alpha: f64,
) -> Result<BatchLoss> {
    let want = if kind == LossKind::Unc { 6 } else { 3 };
    let batch = targets.len();
    if head.shape() != [batch, want] {
        return Err(Error::Shape(format!(
            "{} loss expects head [{batch}, {want}], got {:?}",
            kind.name(),
            head.shape()
        )));
    }
    let inv_n = 1.0 / batch as f64;
    let mut per_angle = [0.0; 3];
    let mut grad_head = Tensor::zeros(head.shape().to_vec());
    let mut grad_bins = None;

    match kind {
        LossKind::Unc => {
            for (s, gt) in targets.iter().enumerate() {
                let row = &head.data()[s * 6..(s + 1) * 6];
                let g = &mut grad_head.data_mut()[s * 6..(s + 1) * 6];
                let q = gt.to_array();
                for i in 0..3 {
                    let r = row[i] - q[i];
                    let prec = (-row[3 + i]).exp();
                    per_angle[i] += (0.5 * prec * r * r + 0.5 * row[3 + i]) * inv_n;
                    g[i] = prec * r * inv_n;
                    g[3 + i] = (0.5 - 0.5 * prec * r * r) * inv_n;
                }
            }
        }
        LossKind::Mse => {
            for (s, gt) in targets.iter().enumerate() {
                let q = gt.to_array();
                for i in 0..3 {
                    let r = head.data()[s * 3 + i] - q[i];
                    per_angle[i] += r * r * inv_n;
                    grad_head.data_mut()[s * 3 + i] = 2.0 * r * inv_n;
                }
            }
        }
        LossKind::Comb => {
            let (logits, scheme) = bins.ok_or_else(|| {
                Error::InvalidArgument("COMB loss needs classification logits".into())
            })?;
            let nb = scheme.n_bins;
            if logits.shape() != [batch, 3 * nb] {
                return Err(Error::Shape(format!(
                    "COMB logits expected [{batch}, {}], got {:?}",
                    3 * nb,
                    logits.shape()
                )));
            }
            let mut gb = Tensor::zeros(logits.shape().to_vec());
            for (s, gt) in targets.iter().enumerate() {
                let q = gt.to_array();
                for i in 0..3 {
                    let off = s * 3 * nb + i * nb;
                    let z = &logits.data()[off..off + nb];
                    let target = scheme.bin_index(q[i])?;
                    let lse = log_sum_exp(z);
                    let r = head.data()[s * 3 + i] - q[i];
                    per_angle[i] += (lse - z[target] + comb_alpha * r * r) * inv_n;
                    grad_head.data_mut()[s * 3 + i] = 2.0 * comb_alpha * r * inv_n;
                    let gz = &mut gb.data_mut()[off..off + nb];
                    for (k, (gk, zk)) in gz.iter_mut().zip(z).enumerate() {
                        let p = (zk - lse).exp();
                        *gk = (p - if k == target { 1.0 } else { 0.0 }) * inv_n;
                    }
                }
            }
            grad_bins = Some(gb);
        }
    }
    let value = LossValue::from_terms(per_angle);
    if !value.total.is_finite() {
        return Err(Error::NonFinite(format!("{} loss = {}", kind.name(), value.total)));
    }
    Ok(BatchLoss {
        value,
        grad_head,
        grad_bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn est(pose: [f64; 3], log_var: [f64; 3]) -> PoseEstimate {
        PoseEstimate {
            pose: EulerPose::from_array(pose),
            log_var,
        }
    }

    #[test]
    fn hhp_examples() {
        let gt = EulerPose::new(10.0, -20.0, 5.0);
        assert_eq!(l_hhp(&est([10.0, -20.0, 5.0], [0.0; 3]), gt).total, 0.0);
        let v = l_hhp(&est([11.0, -19.0, 6.0], [0.0; 3]), gt);
        assert!((v.total - 1.5).abs() < 1e-15);
        let v = l_hhp(&est([12.0, -20.0, 5.0], [4f64.ln(), 0.0, 0.0]), gt);
        assert!((v.per_angle[0] - (0.5 + 0.5 * 4f64.ln())).abs() < 1e-15);
        assert!((v.per_angle[0] - 1.1931).abs() < 1e-4);
        assert_eq!(v.per_angle[1], 0.0);
        assert!((v.total - v.per_angle.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn hhp_can_be_negative() {
        let gt = EulerPose::new(1.0, 2.0, 3.0);
        let v = l_hhp(&est([1.0, 2.0, 3.0], [-2.0; 3]), gt);
        assert_eq!(v.per_angle, [-1.0; 3]);
        assert_eq!(v.total, -3.0);
    }

    #[test]
    fn mse_examples() {
        let gt = EulerPose::new(0.0, 0.0, 0.0);
        assert_eq!(l_mse(gt, gt).total, 0.0);
        assert_eq!(l_mse(EulerPose::new(1.0, -2.0, 3.0), gt).total, 14.0);
        let pred = EulerPose::new(3.5, -1.25, 7.0);
        let gt = EulerPose::new(1.0, 2.0, -4.0);
        let hhp = l_hhp(&PoseEstimate { pose: pred, log_var: [0.0; 3] }, gt);
        assert_eq!(hhp.total, 0.5 * l_mse(pred, gt).total);
    }

    #[test]
    fn binning() {
        let b = BinningScheme::default();
        assert_eq!(b, BinningScheme::with_bins(66));
        assert_eq!(b.n_bins as f64 * b.bin_width, b.upper() - b.lower);
        assert_eq!(b.upper(), 99.0);
        assert_eq!(b.bin_index(-99.0).unwrap(), 0);
        assert_eq!(b.bin_index(-96.0).unwrap(), 1);
        assert_eq!(b.bin_index(0.0).unwrap(), 33);
        assert_eq!(b.bin_index(99.0).unwrap(), 65);
        assert!(matches!(b.bin_index(99.5), Err(Error::OutOfBinRange { .. })));
        assert!(b.bin_index(f64::NAN).is_err());
    }

    #[test]
    fn comb_examples() {
        let b = BinningScheme::default();
        let gt = EulerPose::new(10.0, -20.0, 5.0);
        let mut logits = vec![-1e3; 3 * 66];
        for (i, q) in gt.to_array().into_iter().enumerate() {
            logits[i * 66 + b.bin_index(q).unwrap()] = 1e3;
        }
        let v = l_comb(gt, &logits, gt, 1.0, &b).unwrap();
        assert!(v.total.abs() < 1e-12);

        let uniform = vec![0.3; 3 * 66];
        let v = l_comb(gt, &uniform, gt, 1.0, &b).unwrap();
        for t in v.per_angle {
            assert!((t - 66f64.ln()).abs() < 1e-12);
        }
        assert!((66f64.ln() - 4.1897).abs() < 1e-4);

        let off = EulerPose::new(12.0, -20.0, 5.0);
        let with = l_comb(off, &uniform, gt, 1.0, &b).unwrap();
        let without = l_comb(off, &uniform, gt, 0.0, &b).unwrap();
        assert!((with.per_angle[0] - without.per_angle[0] - 4.0).abs() < 1e-12);
        assert_eq!(without.per_angle, v.per_angle);

        let far = EulerPose::new(120.0, 0.0, 0.0);
        assert!(l_comb(far, &uniform, far, 1.0, &b).is_err());
        assert!(l_comb(gt, &uniform[..10], gt, 1.0, &b).is_err());
    }

    #[test]
    fn nll_identity_examples() {
        let gt = EulerPose::new(0.0, 0.0, 0.0);
        let p = est([1.0, 1.0, 1.0], [0.0; 3]);
        assert!(nll_equivalence_check(&p, gt) < 1e-12);
        // both sides equal 0.5 per angle for s = 0, residual 1
        assert_eq!(l_hhp(&p, gt).per_angle, [0.5; 3]);
    }

    #[test]
    fn log_variance_minimizer_is_log_squared_residual() {
        // ∂/∂s (½e^{−s}r² + ½s) = 0  ⇔  s = log r²
        let r: f64 = 3.7;
        let loss = |s: f64| 0.5 * (-s).exp() * r * r + 0.5 * s;
        let (mut a, mut b) = (-20.0, 20.0);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if loss(c) < loss(d) {
                b = d;
            } else {
                a = c;
            }
        }
        assert!(((a + b) / 2.0 - (r * r).ln()).abs() < 1e-6);
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("unc".parse::<LossKind>().unwrap(), LossKind::Unc);
        assert_eq!("MSE".parse::<LossKind>().unwrap(), LossKind::Mse);
        assert_eq!("comb".parse::<LossKind>().unwrap(), LossKind::Comb);
        assert!("l1".parse::<LossKind>().is_err());
    }

    fn fd_check(kind: LossKind, head: Tensor, bins: Option<Tensor>, targets: &[EulerPose]) {
        let scheme = BinningScheme::default();
        let eval = |h: &Tensor, b: &Option<Tensor>| {
            batch_loss(kind, h, b.as_ref().map(|t| (t, &scheme)), targets, 1.0)
                .unwrap()
                .value
                .total
        };
        let bl = batch_loss(kind, &head, bins.as_ref().map(|t| (t, &scheme)), targets, 1.0).unwrap();
        let eps = 1e-6;
        for i in 0..head.len() {
            let (mut hp, mut hm) = (head.clone(), head.clone());
            hp.data_mut()[i] += eps;
            hm.data_mut()[i] -= eps;
            let num = (eval(&hp, &bins) - eval(&hm, &bins)) / (2.0 * eps);
            let a = bl.grad_head.data()[i];
            assert!((a - num).abs() <= 1e-6 * a.abs().max(1.0), "{kind:?} head[{i}]: {a} vs {num}");
        }
        if let Some(b) = &bins {
            for i in (0..b.len()).step_by(7) {
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp.data_mut()[i] += eps;
                bm.data_mut()[i] -= eps;
                let num = (eval(&head, &Some(bp)) - eval(&head, &Some(bm))) / (2.0 * eps);
                let a = bl.grad_bins.as_ref().unwrap().data()[i];
                assert!((a - num).abs() <= 1e-6 * a.abs().max(1.0), "bins[{i}]: {a} vs {num}");
            }
        }
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        let targets = [EulerPose::new(10.0, -5.0, 2.0), EulerPose::new(-40.0, 30.0, -12.0)];
        let head6 = Tensor::new(
            vec![2, 6],
            vec![12.0, -4.0, 1.0, 0.5, -0.3, 1.2, -35.0, 33.0, -10.0, 2.0, 0.1, -1.0],
        )
        .unwrap();
        fd_check(LossKind::Unc, head6, None, &targets);
        let head3 = Tensor::new(vec![2, 3], vec![12.0, -4.0, 1.0, -35.0, 33.0, -10.0]).unwrap();
        fd_check(LossKind::Mse, head3.clone(), None, &targets);
        let logits: Vec<f64> = (0..2 * 198).map(|i| ((i * 37 % 101) as f64) / 25.0 - 2.0).collect();
        fd_check(
            LossKind::Comb,
            head3,
            Some(Tensor::new(vec![2, 198], logits).unwrap()),
            &targets,
        );
    }

    #[test]
    fn batch_loss_is_sample_mean() {
        let targets = [EulerPose::new(1.0, 2.0, 3.0), EulerPose::new(-4.0, 0.5, 9.0)];
        let rows = [[1.5, 2.0, 2.0, 0.1, -0.2, 0.3], [-3.0, 1.0, 8.0, 1.0, 0.0, -0.5]];
        let head = Tensor::new(vec![2, 6], rows.concat()).unwrap();
        let bl = batch_loss(LossKind::Unc, &head, None, &targets, 1.0).unwrap();
        let want = rows
            .iter()
            .zip(&targets)
            .map(|(r, t)| l_hhp(&est([r[0], r[1], r[2]], [r[3], r[4], r[5]]), *t).total)
            .sum::<f64>()
            / 2.0;
        assert!((bl.value.total - want).abs() < 1e-12);
        assert!(batch_loss(LossKind::Mse, &head, None, &targets, 1.0).is_err());
        let h3 = Tensor::zeros(vec![2, 3]);
        assert!(batch_loss(LossKind::Comb, &h3, None, &targets, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn nll_identity_holds(
            f in proptest::array::uniform3(-30.0..30.0f64),
            q in proptest::array::uniform3(-30.0..30.0f64),
            s in proptest::array::uniform3(-2.0..10.0f64),
        ) {
            let p = est(f, s);
            prop_assert!(nll_equivalence_check(&p, EulerPose::from_array(q)) < 1e-9);
        }

        #[test]
        fn hhp_is_symmetric_in_angles(
            f in proptest::array::uniform3(-99.0..99.0f64),
            q in proptest::array::uniform3(-99.0..99.0f64),
            s in proptest::array::uniform3(-5.0..5.0f64),
        ) {
            let base = l_hhp(&est(f, s), EulerPose::from_array(q)).total;
            let perm = |a: [f64; 3]| [a[2], a[0], a[1]];
            let rotated = l_hhp(&est(perm(f), perm(s)), EulerPose::from_array(perm(q))).total;
            prop_assert!((base - rotated).abs() <= 1e-12 * base.abs().max(1.0));
        }
    }
}
