//! Adam and the mini-batch training loop.
//!
//! Each epoch shuffles the training set with a seeded generator, runs
//! mini-batches (the last, possibly short, batch is kept), and scores the
//! validation split with the training objective. The returned parameters
//! are the snapshot of the epoch with the lowest validation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::geometry::{angular_error, mae, EulerPose, Mae};
use crate::keypoints::{normalize, NormalizedInput};
use crate::losses::{batch_loss, BinningScheme, LossKind, LossValue};
use crate::model::{binning_for, HeadKind, ModelConfig, ModelParams};
use crate::{Error, Result, Sample};

/// Samples scored per graph when evaluating a whole split.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight of the regression term in the combined loss.
    pub comb_alpha: f64,
    /// Bins of the combined-loss classifier.
    pub comb_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 100,
            loss_kind: LossKind::Unc,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            comb_alpha: 1.0,
            comb_bins: BinningScheme::default().n_bins,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// The output head a model needs for this objective.
    pub fn head(&self) -> HeadKind {
        match self.loss_kind {
            LossKind::Unc => HeadKind::Uncertainty,
            LossKind::Mse => HeadKind::Angles,
            LossKind::Comb => HeadKind::AnglesWithBins {
                n_bins: self.comb_bins,
            },
        }
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::Shape(format!("adam: tensor {i} shape mismatch")));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
        }
    }
    state.t += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// A normalized input with its ground-truth pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledInput {
    pub input: NormalizedInput,
    pub target: EulerPose,
}

/// Normalizes labelled samples; errors on missing or non-finite poses.
pub fn prepare(samples: &[Sample]) -> Result<Vec<LabeledInput>> {
    samples
        .iter()
        .map(|s| {
            let target = s.pose.ok_or_else(|| {
                Error::InvalidArgument(format!("sample '{}' has no ground-truth pose", s.id))
            })?;
            if !target.is_finite() {
                return Err(Error::NonFinite(format!("pose of sample '{}'", s.id)));
            }
            Ok(LabeledInput {
                input: normalize(&s.keypoints)?,
                target,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: Mae,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the lowest validation loss.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch)
    }
}

/// Mean loss and MAE of `params` over a labelled split.
pub fn evaluate_split(
    params: &ModelParams,
    data: &[LabeledInput],
    kind: LossKind,
    comb_alpha: f64,
) -> Result<(LossValue, Mae)> {
    if data.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let bins = binning_for(params.config());
    let mut sum = [0.0; 3];
    let mut errors = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let inputs: Vec<NormalizedInput> = chunk.iter().map(|d| d.input).collect();
        let targets: Vec<EulerPose> = chunk.iter().map(|d| d.target).collect();
        let mut g = Graph::new();
        let nodes = params.forward_graph(&mut g, &inputs)?;
        let head = g.value(nodes.head);
        let logits = nodes.bins.map(|b| g.value(b));
        let bl = batch_loss(
            kind,
            head,
            logits.zip(bins.as_ref()),
            &targets,
            comb_alpha,
        )?;
        for (s, v) in sum.iter_mut().zip(bl.value.per_angle) {
            *s += v * chunk.len() as f64;
        }
        let width = params.config().head.outputs();
        for (row, t) in head.data().chunks_exact(width).zip(&targets) {
            let pred = EulerPose::new(row[0], row[1], row[2]);
            errors.push(angular_error(pred, *t));
        }
    }
    let per_angle = sum.map(|s| s / data.len() as f64);
    Ok((
        LossValue {
            total: per_angle.iter().sum(),
            per_angle,
        },
        mae(&errors)?,
    ))
}

/// Trains a fresh model; see [`train_with`].
pub fn train(
    model_config: &ModelConfig,
    train_set: &[LabeledInput],
    val_set: &[LabeledInput],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    train_with(model_config, train_set, val_set, config, |_| {})
}

/// Trains a fresh model, calling `on_epoch` after every epoch.
///
/// The model head is chosen from the loss kind. Initialization uses
/// `config.seed`; shuffling uses an independent stream derived from it.
pub fn train_with<F>(
    model_config: &ModelConfig,
    train_set: &[LabeledInput],
    val_set: &[LabeledInput],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ModelParams, TrainHistory)>
where
    F: FnMut(&EpochRecord),
{
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let model_config = model_config.clone().with_head(config.head());
    let mut params = ModelParams::build(model_config, config.seed)?;
    let bins = binning_for(params.config());
    if let Some(b) = &bins {
        for d in train_set.iter().chain(val_set) {
            for a in d.target.to_array() {
                b.bin_index(a)?;
            }
        }
    }
    let mut adam = AdamState::new(params.tensors());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, idx) in order.chunks(config.batch_size).enumerate() {
            let inputs: Vec<NormalizedInput> = idx.iter().map(|&i| train_set[i].input).collect();
            let targets: Vec<EulerPose> = idx.iter().map(|&i| train_set[i].target).collect();
            let mut g = Graph::new();
            let nodes = params.forward_graph(&mut g, &inputs)?;
            let bl = batch_loss(
                config.loss_kind,
                g.value(nodes.head),
                nodes.bins.map(|b| g.value(b)).zip(bins.as_ref()),
                &targets,
                config.comb_alpha,
            )
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            let mut locals = vec![(nodes.head, bl.grad_head)];
            if let (Some(b), Some(gb)) = (nodes.bins, bl.grad_bins) {
                locals.push((b, gb));
            }
            let loss = g.external_scalar(bl.value.total, locals)?;
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = nodes
                .params
                .iter()
                .zip(params.tensors())
                .map(|(&v, p)| grads.get_or_zeros(v, p))
                .collect();
            adam_step(params.tensors_mut(), &grads, &mut adam, config).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: bl.value.total,
                },
                other => other,
            })?;
            epoch_loss += bl.value.total * idx.len() as f64;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let (val_loss, val_mae) =
            evaluate_split(&params, val_set, config.loss_kind, config.comb_alpha)?;
        if !val_loss.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: 0,
                loss: val_loss.total,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: val_loss.total,
            val_mae,
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(b, _)| val_loss.total < *b) {
            best = Some((val_loss.total, params.clone()));
            history.best_epoch = history.epochs.len();
        }
        history.epochs.push(record);
    }
    let (_, best_params) = best.expect("at least one epoch");
    Ok((best_params, history))
}
