//! The three-stream confidence-gated network.
//!
//! ```text
//!  x1 ─ conv ─ LeakyReLU ─ flatten ─┐
//!                                   ⊗ ─ v1 ─┐
//!  c  ─ conv ─ sigmoid ── flatten ──┤       concat ─ FC ─ FC ─ FC ─ head
//!                                   ⊗ ─ v2 ─┘
//!  x2 ─ conv ─ LeakyReLU ─ flatten ─┘
//! ```
//!
//! The head emits `(yaw, pitch, roll, s_y, s_p, s_r)` with angles in degrees
//! and `s = log σ²`. The ablation heads drop the log-variances and, for the
//! combined loss, add a per-angle bin classifier on the last hidden layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::geometry::EulerPose;
use crate::keypoints::{NormalizedInput, N_KEYPOINTS};
use crate::losses::BinningScheme;
use crate::{Error, Result};

/// Weight and bias initialization variance.
pub const INIT_VARIANCE: f64 = 0.05;

/// Output head variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    /// Three angles and three log-variances.
    Uncertainty,
    /// Three angles only.
    Angles,
    /// Three angles plus `3 × n_bins` classification logits.
    AnglesWithBins { n_bins: usize },
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Uncertainty => 6,
            HeadKind::Angles | HeadKind::AnglesWithBins { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_keypoints: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    /// Hidden layer widths before applying `alpha`.
    pub fc_sizes: [usize; 3],
    /// Width reduction factor in (0, 1].
    pub alpha: f64,
    pub leaky_slope: f64,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_keypoints: N_KEYPOINTS,
            conv_filters: 5,
            conv_kernel: 1,
            fc_sizes: [250, 200, 150],
            alpha: 1.0,
            leaky_slope: 0.01,
            head: HeadKind::Uncertainty,
        }
    }
}

impl ModelConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_keypoints != N_KEYPOINTS {
            return bad(format!(
                "n_keypoints must be {N_KEYPOINTS}, got {}",
                self.n_keypoints
            ));
        }
        if self.conv_filters == 0 {
            return bad("conv_filters must be positive".into());
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel > self.n_keypoints {
            return bad(format!(
                "conv_kernel must be odd and at most {}, got {}",
                self.n_keypoints, self.conv_kernel
            ));
        }
        if self.fc_sizes.contains(&0) {
            return bad(format!("zero-size layer in {:?}", self.fc_sizes));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.leaky_slope > 0.0) {
            return bad(format!("leaky_slope must be positive, got {}", self.leaky_slope));
        }
        if let HeadKind::AnglesWithBins { n_bins } = self.head {
            if n_bins < 2 {
                return bad(format!("need at least 2 bins, got {n_bins}"));
            }
        }
        Ok(())
    }

    /// Hidden widths after scaling by `alpha` (round half up, at least 1).
    pub fn effective_fc_sizes(&self) -> [usize; 3] {
        self.fc_sizes
            .map(|s| ((s as f64 * self.alpha + 0.5).floor() as usize).max(1))
    }

    /// Length of the concatenated gated vector `[v1, v2]`.
    pub fn gated_width(&self) -> usize {
        2 * self.n_keypoints * self.conv_filters
    }

    pub fn has_uncertainty(&self) -> bool {
        self.head == HeadKind::Uncertainty
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (f, k) = (self.conv_filters, self.conv_kernel);
        let mut out = Vec::new();
        for stream in ["x1", "x2", "c"] {
            out.push((format!("conv_{stream}.weight"), vec![f, k]));
            out.push((format!("conv_{stream}.bias"), vec![f]));
        }
        let mut width = self.gated_width();
        for (i, h) in self.effective_fc_sizes().into_iter().enumerate() {
            out.push((format!("fc{}.weight", i + 1), vec![width, h]));
            out.push((format!("fc{}.bias", i + 1), vec![h]));
            width = h;
        }
        out.push(("head.weight".into(), vec![width, self.head.outputs()]));
        out.push(("head.bias".into(), vec![self.head.outputs()]));
        if let HeadKind::AnglesWithBins { n_bins } = self.head {
            out.push(("bins.weight".into(), vec![width, 3 * n_bins]));
            out.push(("bins.bias".into(), vec![3 * n_bins]));
        }
        out
    }
}

/// Number of trainable scalars.
pub fn param_count(config: &ModelConfig) -> usize {
    config
        .layout()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Multiply-accumulate operations of one forward pass: the three stream
/// convolutions, the two gating products, the FC trunk and the output head(s).
pub fn mult_add_count(config: &ModelConfig) -> usize {
    let n = config.n_keypoints;
    let conv = 3 * n * config.conv_filters * config.conv_kernel;
    let gating = config.gated_width();
    let mut width = config.gated_width();
    let mut dense = 0;
    for h in config.effective_fc_sizes() {
        dense += width * h;
        width = h;
    }
    let mut head = width * config.head.outputs();
    if let HeadKind::AnglesWithBins { n_bins } = config.head {
        head += width * 3 * n_bins;
    }
    conv + gating + dense + head
}

/// Network output for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: EulerPose,
    /// `(s_y, s_p, s_r)` with `s = log σ²`, σ in degrees. Zero for heads
    /// without an uncertainty output.
    pub log_var: [f64; 3],
}

impl PoseEstimate {
    pub fn is_finite(&self) -> bool {
        self.pose.is_finite() && self.log_var.iter().all(|v| v.is_finite())
    }

    /// Mean of the three log-variances.
    pub fn mean_log_var(&self) -> f64 {
        self.log_var.iter().sum::<f64>() / 3.0
    }

    /// Per-angle standard deviation `σ = exp(s / 2)`.
    pub fn sigma(&self) -> [f64; 3] {
        self.log_var.map(|s| (s / 2.0).exp())
    }
}

/// Graph nodes produced by [`ModelParams::forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// One leaf per parameter tensor, in layout order.
    pub params: Vec<Var>,
    /// `[B, head.outputs()]`.
    pub head: Var,
    /// `[B, 3 · n_bins]` for the combined-loss head.
    pub bins: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Draws every weight and bias i.i.d. from `Normal(0, INIT_VARIANCE)`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_VARIANCE.sqrt()).expect("valid normal");
        let tensors = config
            .layout()
            .into_iter()
            .map(|(_, shape)| {
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, tensors })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(shape))
            .collect();
        Ok(Self { config, tensors })
    }

    /// Assembles parameters from tensors in layout order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.config.layout().iter().position(|(n, _)| n == name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Builds the forward pass for a batch on `g`, with parameters as trainable leaves.
    pub fn forward_graph(&self, g: &mut Graph, inputs: &[NormalizedInput]) -> Result<ForwardNodes> {
        let params: Vec<Var> = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        let (head, bins) = self.forward_with(g, &params, inputs)?;
        Ok(ForwardNodes { params, head, bins })
    }

    /// Forward pass using caller-provided parameter nodes (layout order).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        params: &[Var],
        inputs: &[NormalizedInput],
    ) -> Result<(Var, Option<Var>)> {
        let cfg = &self.config;
        if params.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter nodes, got {}",
                self.tensors.len(),
                params.len()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::Shape("empty input batch".into()));
        }
        let n = cfg.n_keypoints;
        let batch = inputs.len();
        let stream = |f: fn(&NormalizedInput) -> &[f64; N_KEYPOINTS]| {
            let data = inputs.iter().flat_map(|i| f(i).iter().copied()).collect();
            Tensor::new(vec![batch, n], data)
        };
        let x1 = g.input(stream(|i| &i.x1)?);
        let x2 = g.input(stream(|i| &i.x2)?);
        let c = g.input(stream(|i| &i.c)?);

        let slope = cfg.leaky_slope;
        let h1 = g.conv1d(x1, params[0], params[1])?;
        let h1 = g.leaky_relu(h1, slope);
        let h1 = g.flatten(h1);
        let h2 = g.conv1d(x2, params[2], params[3])?;
        let h2 = g.leaky_relu(h2, slope);
        let h2 = g.flatten(h2);
        let gate = g.conv1d(c, params[4], params[5])?;
        let gate = g.sigmoid(gate);
        let gate = g.flatten(gate);
        let v1 = g.mul(h1, gate)?;
        let v2 = g.mul(h2, gate)?;
        let mut h = g.concat(&[v1, v2])?;
        for layer in 0..3 {
            let (w, b) = (params[6 + 2 * layer], params[7 + 2 * layer]);
            h = g.dense(h, w, b)?;
            h = g.leaky_relu(h, slope);
        }
        let head = g.dense(h, params[12], params[13])?;
        let bins = match cfg.head {
            HeadKind::AnglesWithBins { .. } => Some(g.dense(h, params[14], params[15])?),
            _ => None,
        };
        Ok((head, bins))
    }

    /// Pose estimates for a batch of inputs.
    pub fn predict(&self, inputs: &[NormalizedInput]) -> Result<Vec<PoseEstimate>> {
        let mut g = Graph::new();
        let nodes = self.forward_graph(&mut g, inputs)?;
        let width = self.config.head.outputs();
        Ok(g.value(nodes.head)
            .data()
            .chunks_exact(width)
            .map(|row| decode_head(row, self.config.head))
            .collect())
    }

    /// Pose estimate for a single input.
    pub fn forward(&self, input: &NormalizedInput) -> Result<PoseEstimate> {
        Ok(self.predict(std::slice::from_ref(input))?[0])
    }

    /// Classification logits `[3 × n_bins]` per sample for the combined-loss head.
    pub fn predict_bins(&self, inputs: &[NormalizedInput]) -> Result<Option<Vec<Vec<f64>>>> {
        let mut g = Graph::new();
        let nodes = self.forward_graph(&mut g, inputs)?;
        Ok(nodes.bins.map(|b| {
            let t = g.value(b);
            let w = t.shape()[1];
            t.data().chunks_exact(w).map(<[f64]>::to_vec).collect()
        }))
    }
}

/// Splits one head row into a [`PoseEstimate`].
pub fn decode_head(row: &[f64], head: HeadKind) -> PoseEstimate {
    let pose = EulerPose::new(row[0], row[1], row[2]);
    let log_var = match head {
        HeadKind::Uncertainty => [row[3], row[4], row[5]],
        _ => [0.0; 3],
    };
    PoseEstimate { pose, log_var }
}

/// Binning used by the combined-loss head of `config`, if any.
pub fn binning_for(config: &ModelConfig) -> Option<BinningScheme> {
    match config.head {
        HeadKind::AnglesWithBins { n_bins } => Some(BinningScheme::with_bins(n_bins)),
        _ => None,
    }
}
