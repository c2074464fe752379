//! Per-token MLP velocity models, hand-written reverse mode, Adam, and the
//! structure and affordance training loops.
//!
//! Every token sees `[token features, pooled condition, time embedding]` and
//! passes through `depth` tanh layers and an affine scalar head. The pooled
//! and time parts are shared by all tokens of a sample, so their first-layer
//! product is computed once per sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{self, FlowConfig, FlowError};
use crate::geometry::{
    look_at_world_up, CameraIntrinsics, GeometryError, Vec3, Viewpoint, EVAL_RADIUS,
};
use crate::render::{render_observation, RenderError};
use crate::synthscene::{
    ground_truth_affordance, occupancy_set, QueryTable, SceneError, SyntheticObject,
};
use crate::voxel::{
    backproject_view, fuse, index_from_linear, linear_index, positional_encoding_3d, to_condition,
    voxel_center, Occupancy, SparseVoxelGrid, VoxelError, VoxelIndex,
};

/// Width of the sinusoidal time embedding.
pub const TIME_EMBED_DIM: usize = 16;
/// Default positional-encoding width of a token.
pub const DEFAULT_PE_DIM: usize = 24;
/// Per-voxel geometry descriptors fed to the affordance model.
pub const GEOMETRY_DIM: usize = 15;
/// Lower bound on `t` when a denoiser output is turned into a velocity.
pub const DENOISER_T_MIN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no queries available for object {0}")]
    MissingQueries(String),
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("model is untrained")]
    Untrained,
    #[error("model kind mismatch: expected {expected:?}, got {got:?}")]
    Kind { expected: ModelKind, got: ModelKind },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Structure,
    Affordance,
}

/// How the network head becomes a velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    /// The head is the velocity.
    Velocity,
    /// The head is a clean-sample estimate `D`; `v = (x_t - D) / max(t, t_min)`.
    #[default]
    Denoiser,
}

/// `[sin(1000 t w_i), cos(1000 t w_i)]` with `w_i = 10000^(-i/8)`.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        let a = 1000.0 * t * w;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    out
}

/// Affine layer, row-major `rows x cols` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Shapes of a [`VelocityModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub token_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Token columns `[start, end)` holding condition-derived features.
    pub cond_token_cols: (usize, usize),
}

/// Data-layout facts the feature builders need to reproduce a model's inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub resolution: usize,
    pub channels: usize,
    pub pe_dim: usize,
    /// Standard deviation of ε during training.
    pub noise_std: f64,
    /// Multiplier on clean targets during training.
    pub target_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityModel {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub meta: ModelMeta,
    pub parametrization: Parametrization,
    pub layers: Vec<Dense>,
    pub seed: u64,
    pub trained_steps: usize,
    /// Echo of the trainer configuration that produced the parameters.
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<f64>,
    shared_input: Vec<f64>,
    /// Post-tanh activations of each hidden layer, `n x hidden`.
    acts: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl VelocityModel {
    /// Seeded initialization. Hidden and output weights are normal with
    /// variance `1 / fan_in` (output scaled by 0.5); biases and every
    /// first-layer column fed by condition inputs start at zero.
    pub fn new(
        kind: ModelKind,
        dims: ModelDims,
        meta: ModelMeta,
        seed: u64,
    ) -> Result<Self, NetError> {
        let (cs, ce) = dims.cond_token_cols;
        if cs > ce || ce > dims.token_dim {
            return Err(NetError::Shape(format!(
                "condition columns {cs}..{ce} outside token width {}",
                dims.token_dim
            )));
        }
        if dims.depth > 0 && dims.hidden == 0 {
            return Err(NetError::Shape("hidden width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = dims.token_dim + dims.cond_dim + TIME_EMBED_DIM;
        let mut layers = Vec::with_capacity(dims.depth + 1);
        let mut fan_in = input;
        for l in 0..=dims.depth {
            let rows = if l == dims.depth { 1 } else { dims.hidden };
            let gain = if l == dims.depth { 0.5 } else { 1.0 };
            let mut layer = Dense::zeros(rows, fan_in);
            let std = gain / (fan_in as f64).sqrt();
            for w in layer.weights.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = std * z;
            }
            if l == 0 {
                for i in 0..rows {
                    for c in (cs..ce).chain(dims.token_dim..dims.token_dim + dims.cond_dim) {
                        layer.weights[i * fan_in + c] = 0.0;
                    }
                }
            }
            layers.push(layer);
            fan_in = rows;
        }
        Ok(Self {
            kind,
            dims,
            meta,
            parametrization: Parametrization::default(),
            layers,
            seed,
            trained_steps: 0,
            training: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims.token_dim + self.dims.cond_dim + TIME_EMBED_DIM
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<(), NetError> {
        if self.kind != kind {
            return Err(NetError::Kind {
                expected: kind,
                got: self.kind,
            });
        }
        Ok(())
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<(), NetError> {
        if params.len() != self.param_count() {
            return Err(NetError::Shape(format!(
                "{} params, model has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn check_inputs(&self, tokens: &[f64], pooled: &[f64]) -> Result<usize, NetError> {
        if self.dims.token_dim == 0 || !tokens.len().is_multiple_of(self.dims.token_dim) {
            return Err(NetError::Shape(format!(
                "{} token values for width {}",
                tokens.len(),
                self.dims.token_dim
            )));
        }
        if pooled.len() != self.dims.cond_dim {
            return Err(NetError::Shape(format!(
                "pooled width {} vs {}",
                pooled.len(),
                self.dims.cond_dim
            )));
        }
        Ok(tokens.len() / self.dims.token_dim)
    }

    /// Raw network head for every token (row-major `n x token_dim` input).
    pub fn forward(&self, tokens: &[f64], pooled: &[f64], t: f64) -> Result<Vec<f64>, NetError> {
        Ok(self.forward_cached(tokens, pooled, t)?.output)
    }

    pub fn forward_cached(
        &self,
        tokens: &[f64],
        pooled: &[f64],
        t: f64,
    ) -> Result<ForwardCache, NetError> {
        let n = self.check_inputs(tokens, pooled)?;
        let td = self.dims.token_dim;
        let mut shared_input = pooled.to_vec();
        shared_input.extend_from_slice(&time_embedding(t));
        let first = &self.layers[0];
        // bias + W[:, td..] * [pooled, temb], once per sample
        let shared: Vec<f64> = (0..first.rows)
            .map(|i| first.bias[i] + dot(&first.row(i)[td..], &shared_input))
            .collect();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.dims.depth);
        let mut output = vec![0.0; n];
        let mut cur = vec![0.0; n * first.rows];
        for k in 0..n {
            let tok = &tokens[k * td..(k + 1) * td];
            for i in 0..first.rows {
                cur[k * first.rows + i] = shared[i] + dot(&first.row(i)[..td], tok);
            }
        }
        for l in 0..=self.dims.depth {
            if l == self.dims.depth {
                if l == 0 {
                    output.copy_from_slice(&cur);
                } else {
                    let layer = &self.layers[l];
                    let prev = acts.last().expect("depth > 0");
                    for k in 0..n {
                        output[k] = layer.bias[0]
                            + dot(layer.row(0), &prev[k * layer.cols..(k + 1) * layer.cols]);
                    }
                }
                break;
            }
            if l > 0 {
                let layer = &self.layers[l];
                let prev = acts.last().expect("l > 0");
                cur = vec![0.0; n * layer.rows];
                for k in 0..n {
                    let x = &prev[k * layer.cols..(k + 1) * layer.cols];
                    for i in 0..layer.rows {
                        cur[k * layer.rows + i] = layer.bias[i] + dot(layer.row(i), x);
                    }
                }
            }
            cur.iter_mut().for_each(|v| *v = v.tanh());
            acts.push(std::mem::take(&mut cur));
        }
        if !output.iter().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite("forward"));
        }
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            shared_input,
            acts,
            output,
        })
    }

    /// Gradient of `Σ_k dout[k] * output[k]` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, dout: &[f64]) -> Result<Vec<Dense>, NetError> {
        let n = cache.output.len();
        if dout.len() != n {
            return Err(NetError::Shape(format!(
                "dout {} vs outputs {n}",
                dout.len()
            )));
        }
        let td = self.dims.token_dim;
        let mut grads: Vec<Dense> = self
            .layers
            .iter()
            .map(|l| Dense::zeros(l.rows, l.cols))
            .collect();
        let mut delta: Vec<f64> = dout.to_vec();
        for l in (0..=self.dims.depth).rev() {
            let layer = &self.layers[l];
            let g = &mut grads[l];
            if l > 0 {
                let input = &cache.acts[l - 1];
                for k in 0..n {
                    let x = &input[k * layer.cols..(k + 1) * layer.cols];
                    for i in 0..layer.rows {
                        let d = delta[k * layer.rows + i];
                        if d == 0.0 {
                            continue;
                        }
                        g.bias[i] += d;
                        for (gw, xv) in g.weights[i * layer.cols..(i + 1) * layer.cols]
                            .iter_mut()
                            .zip(x)
                        {
                            *gw += d * xv;
                        }
                    }
                }
                // propagate through W and the tanh of the previous layer
                let mut next = vec![0.0; n * layer.cols];
                for k in 0..n {
                    for i in 0..layer.rows {
                        let d = delta[k * layer.rows + i];
                        if d == 0.0 {
                            continue;
                        }
                        for (nv, w) in next[k * layer.cols..(k + 1) * layer.cols]
                            .iter_mut()
                            .zip(layer.row(i))
                        {
                            *nv += d * w;
                        }
                    }
                }
                for (nv, a) in next.iter_mut().zip(input) {
                    *nv *= 1.0 - a * a;
                }
                delta = next;
            } else {
                let mut summed = vec![0.0; layer.rows];
                for k in 0..n {
                    let tok = &cache.tokens[k * td..(k + 1) * td];
                    for i in 0..layer.rows {
                        let d = delta[k * layer.rows + i];
                        summed[i] += d;
                        if d == 0.0 {
                            continue;
                        }
                        for (gw, xv) in g.weights[i * layer.cols..i * layer.cols + td]
                            .iter_mut()
                            .zip(tok)
                        {
                            *gw += d * xv;
                        }
                    }
                }
                for (i, &si) in summed.iter().enumerate().take(layer.rows) {
                    g.bias[i] += si;
                    for (gw, xv) in g.weights[i * layer.cols + td..(i + 1) * layer.cols]
                        .iter_mut()
                        .zip(&cache.shared_input)
                    {
                        *gw += si * xv;
                    }
                }
            }
        }
        if !grads
            .iter()
            .all(|g| g.weights.iter().chain(&g.bias).all(|v| v.is_finite()))
        {
            return Err(NetError::NonFinite("backward"));
        }
        Ok(grads)
    }

    fn t_eff(t: f64) -> f64 {
        t.max(DENOISER_T_MIN)
    }

    /// Turn raw heads into velocities for the current state `x_t`.
    pub fn head_to_velocity(&self, head: &[f64], state: &[f64], t: f64) -> Vec<f64> {
        match self.parametrization {
            Parametrization::Velocity => head.to_vec(),
            Parametrization::Denoiser => {
                let s = 1.0 / Self::t_eff(t);
                state.iter().zip(head).map(|(x, d)| (x - d) * s).collect()
            }
        }
    }

    /// `dv/dhead`, elementwise.
    fn velocity_jacobian(&self, t: f64) -> f64 {
        match self.parametrization {
            Parametrization::Velocity => 1.0,
            Parametrization::Denoiser => -1.0 / Self::t_eff(t),
        }
    }

    /// Per-token velocity for state `x_t`.
    pub fn velocity(
        &self,
        state: &[f64],
        tokens: &[f64],
        pooled: &[f64],
        t: f64,
    ) -> Result<Vec<f64>, NetError> {
        let head = self.forward(tokens, pooled, t)?;
        if head.len() != state.len() {
            return Err(NetError::Shape(format!(
                "{} tokens vs state {}",
                head.len(),
                state.len()
            )));
        }
        Ok(self.head_to_velocity(&head, state, t))
    }

    /// Loss of one sample and its parameter gradient.
    pub fn sample_loss_grad(&self, sample: &TrainSample) -> Result<(f64, Vec<Dense>), NetError> {
        let cache = self.forward_cached(&sample.tokens, &sample.pooled, sample.t)?;
        if cache.output.len() != sample.x0.len() {
            return Err(NetError::Shape(format!(
                "{} tokens vs {} targets",
                cache.output.len(),
                sample.x0.len()
            )));
        }
        let x_t = flow::interpolate(&sample.x0, &sample.eps, sample.t)?;
        let v = self.head_to_velocity(&cache.output, &x_t, sample.t);
        let (loss, dv) = match &sample.mask {
            None => flow::cfm_loss_mse_grad(&v, &sample.x0, &sample.eps)?,
            Some(gt) => {
                let logits = flow::predicted_clean(&v, &sample.eps)?;
                let (l, g) = flow::mask_loss_grad(&logits, gt)?;
                (l.total(), g.iter().map(|x| -x).collect())
            }
        };
        let jac = self.velocity_jacobian(sample.t);
        let dhead: Vec<f64> = dv.iter().map(|d| d * jac).collect();
        Ok((loss, self.backward(&cache, &dhead)?))
    }

    /// Mean loss over a batch and the matching mean gradient. Per-sample work
    /// runs in parallel; the reduction is sequential in batch order.
    pub fn batch_loss_grad(&self, batch: &[TrainSample]) -> Result<(f64, Vec<Dense>), NetError> {
        if batch.is_empty() {
            return Err(NetError::Shape("empty batch".into()));
        }
        let parts: Vec<(f64, Vec<Dense>)> = batch
            .par_iter()
            .map(|s| self.sample_loss_grad(s))
            .collect::<Result<_, _>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Dense> = self
            .layers
            .iter()
            .map(|l| Dense::zeros(l.rows, l.cols))
            .collect();
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l * scale;
            for (acc, gi) in grads.iter_mut().zip(g) {
                axpy(&mut acc.weights, scale, &gi.weights);
                axpy(&mut acc.bias, scale, &gi.bias);
            }
        }
        Ok((loss, grads))
    }

    /// Batch loss without gradients.
    pub fn batch_loss(&self, batch: &[TrainSample]) -> Result<f64, NetError> {
        Ok(self.batch_loss_grad(batch)?.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, v) in acc.iter_mut().zip(x) {
        *y += a * v;
    }
}

pub fn flatten_grads(grads: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(&g.weights);
        out.extend_from_slice(&g.bias);
    }
    out
}

/// One training example: tokens, pooled condition, timestep, clean target,
/// noise, and (for the mask loss) the binary ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub tokens: Vec<f64>,
    pub pooled: Vec<f64>,
    pub t: f64,
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.cfg.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cfg_dropout: f64,
    /// Inclusive range of views per structure sample.
    pub view_range: (usize, usize),
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub hidden: usize,
    pub depth: usize,
    pub resolution: usize,
    pub channels: usize,
    pub pe_dim: usize,
    pub image_size: u32,
    pub parametrization: Parametrization,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 2e-3,
            cfg_dropout: 0.10,
            view_range: (1, 8),
            seed: 0,
            adam: AdamConfig::default(),
            grad_clip: Some(1.0),
            hidden: 64,
            depth: 2,
            resolution: 8,
            channels: 16,
            pe_dim: DEFAULT_PE_DIM,
            image_size: 128,
            parametrization: Parametrization::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::Config(m.into()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return bad("cfg_dropout must lie in [0, 1]");
        }
        if self.view_range.0 == 0 || self.view_range.0 > self.view_range.1 {
            return bad("view_range must satisfy 1 <= lo <= hi");
        }
        if self.resolution < 4 || self.channels < 4 || self.hidden == 0 || self.image_size == 0 {
            return bad("resolution >= 4, channels >= 4, hidden > 0 and image_size > 0 required");
        }
        if self.pe_dim < 6 {
            return bad("pe_dim must be at least 6");
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Loss value of every optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    /// Mean of `losses[range]`.
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let w = &self.losses[range];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

/// Precomputed positional encodings for every voxel at resolution `r`.
pub fn pe_table(r: usize, dim: usize) -> Result<Vec<f64>, NetError> {
    let mut out = Vec::with_capacity(r * r * r * dim);
    for i in 0..r * r * r {
        out.extend(positional_encoding_3d(&index_from_linear(i, r), r, dim)?);
    }
    Ok(out)
}

/// `1 / sqrt((1-t)^2 s^2 + (σ t)^2)`: unit-variance scaling of `x_t`.
pub fn input_scale(t: f64, noise_std: f64, target_scale: f64) -> f64 {
    1.0 / (((1.0 - t) * target_scale).powi(2) + (noise_std * t).powi(2)).sqrt()
}

fn neighbourhood<F: FnMut(VoxelIndex)>(v: &VoxelIndex, radius: i64, r: usize, mut f: F) {
    for dz in -radius..=radius {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let p = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                if p.iter().all(|&c| c >= 0 && c < r as i64) {
                    f([p[0] as usize, p[1] as usize, p[2] as usize]);
                }
            }
        }
    }
}

/// Condition-derived inputs of the structure model: per-voxel local
/// descriptors of the fused observation and a pooled summary.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureContext {
    pub resolution: usize,
    pub channels: usize,
    /// `r³ x local_dim(channels)`, x-fastest voxel order.
    pub local: Vec<f64>,
    pub pooled: Vec<f64>,
}

impl StructureContext {
    /// Observed flag, fused feature, observed fraction in the 3³ and 5³
    /// neighbourhoods, mean normal alignment toward the voxel from observed
    /// neighbours at both sizes, and the offset from the observed centroid.
    pub fn local_dim(channels: usize) -> usize {
        channels + 8
    }

    pub fn pooled_dim(channels: usize) -> usize {
        channels + 2
    }

    /// All-zero context: the unconditional branch.
    pub fn unconditional(resolution: usize, channels: usize) -> Self {
        Self {
            resolution,
            channels,
            local: vec![0.0; resolution.pow(3) * Self::local_dim(channels)],
            pooled: vec![0.0; Self::pooled_dim(channels)],
        }
    }

    /// Context of a fused grid whose features end with a 3-vector surface
    /// normal. An empty grid gives the unconditional context.
    pub fn from_grid(grid: &SparseVoxelGrid) -> Result<Self, NetError> {
        let (r, c) = (grid.resolution(), grid.channels());
        if grid.is_empty() {
            return Ok(Self::unconditional(r, c));
        }
        if c < 3 {
            return Err(NetError::Shape("features need a trailing normal".into()));
        }
        let n = r * r * r;
        let ld = Self::local_dim(c);
        let mut observed = vec![false; n];
        let mut feats = vec![0.0; n * c];
        let mut centroid = Vec3::zeros();
        for e in grid.entries() {
            let li = linear_index(&e.index, r);
            observed[li] = true;
            feats[li * c..(li + 1) * c].copy_from_slice(&e.feature);
            centroid += voxel_center(&e.index, r);
        }
        centroid /= grid.len() as f64;
        let mut local = vec![0.0; n * ld];
        for li in 0..n {
            let v = index_from_linear(li, r);
            let cv = voxel_center(&v, r);
            let row = &mut local[li * ld..(li + 1) * ld];
            row[0] = if observed[li] { 1.0 } else { 0.0 };
            row[1..1 + c].copy_from_slice(&feats[li * c..(li + 1) * c]);
            for (slot, radius) in [(0usize, 1i64), (1, 2)] {
                let mut count = 0.0;
                let mut align = 0.0;
                neighbourhood(&v, radius, r, |u| {
                    let lu = linear_index(&u, r);
                    if observed[lu] && lu != li {
                        count += 1.0;
                        let normal = Vec3::from_column_slice(&feats[lu * c + c - 3..(lu + 1) * c]);
                        let d = cv - voxel_center(&u, r);
                        align += normal.dot(&d) / (d.norm() * normal.norm().max(1e-12));
                    }
                });
                let side = (2 * radius + 1).pow(3) as f64;
                row[1 + c + slot] = count / side;
                row[3 + c + slot] = if count > 0.0 { align / count } else { 0.0 };
            }
            let off = cv - centroid;
            row[5 + c..8 + c].copy_from_slice(off.as_slice());
        }
        let cond = to_condition(grid)?;
        let mut pooled = cond.pooled();
        let mean_weight =
            grid.entries().iter().map(|e| e.weight as f64).sum::<f64>() / grid.len() as f64;
        pooled.push(grid.len() as f64 / (r * r) as f64);
        pooled.push(mean_weight / 8.0);
        Ok(Self {
            resolution: r,
            channels: c,
            local,
            pooled,
        })
    }

    /// Token matrix for dense state `x_t`: `[x_t * c_in, PE, local]`.
    pub fn tokens(
        &self,
        state: &[f64],
        c_in: f64,
        pe: &[f64],
        pe_dim: usize,
    ) -> Result<Vec<f64>, NetError> {
        let n = self.resolution.pow(3);
        if state.len() != n || pe.len() != n * pe_dim {
            return Err(NetError::Shape(format!(
                "state {} / pe {} for {n} voxels",
                state.len(),
                pe.len()
            )));
        }
        let ld = Self::local_dim(self.channels);
        let td = 1 + pe_dim + ld;
        let mut out = vec![0.0; n * td];
        for k in 0..n {
            let row = &mut out[k * td..(k + 1) * td];
            row[0] = state[k] * c_in;
            row[1..1 + pe_dim].copy_from_slice(&pe[k * pe_dim..(k + 1) * pe_dim]);
            row[1 + pe_dim..].copy_from_slice(&self.local[k * ld..(k + 1) * ld]);
        }
        Ok(out)
    }
}

/// Model dimensions of the structure model.
pub fn structure_dims(cfg: &TrainerConfig) -> ModelDims {
    let ld = StructureContext::local_dim(cfg.channels);
    let start = 1 + cfg.pe_dim;
    ModelDims {
        token_dim: start + ld,
        cond_dim: StructureContext::pooled_dim(cfg.channels),
        hidden: cfg.hidden,
        depth: cfg.depth,
        cond_token_cols: (start, start + ld),
    }
}

/// Model dimensions of the affordance model.
pub fn affordance_dims(cfg: &TrainerConfig, query_dim: usize) -> ModelDims {
    let td = 1 + cfg.pe_dim + GEOMETRY_DIM;
    ModelDims {
        token_dim: td,
        cond_dim: query_dim,
        hidden: cfg.hidden,
        depth: cfg.depth,
        cond_token_cols: (td, td),
    }
}

/// Shape descriptors of every occupied voxel, used as affordance-model
/// token features.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryContext {
    pub resolution: usize,
    pub positions: Vec<VoxelIndex>,
    /// `positions.len() x GEOMETRY_DIM`.
    pub features: Vec<f64>,
}

/// Descriptors per occupied voxel: occupied fraction of the 3³, 5³ and 7³
/// neighbourhoods; offset from the centroid over the largest deviation;
/// signed major and absolute minor horizontal principal coordinates (major
/// axis oriented toward positive skew); normalized height; column and layer
/// fill; object extents; occupied fraction.
pub fn geometry_context(occ: &Occupancy) -> GeometryContext {
    let r = occ.resolution();
    let pos = occ.indices().to_vec();
    let n = pos.len();
    let mut features = vec![0.0; n * GEOMETRY_DIM];
    if n == 0 {
        return GeometryContext {
            resolution: r,
            positions: pos,
            features,
        };
    }
    let mask = occ.to_mask();
    let centres: Vec<Vec3> = pos.iter().map(|p| voxel_center(p, r)).collect();
    let centroid = centres.iter().fold(Vec3::zeros(), |a, c| a + c) / n as f64;
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    let mut ext: f64 = 0.5 / r as f64;
    for c in &centres {
        lo = lo.inf(c);
        hi = hi.sup(c);
        ext = ext.max((c - centroid).amax());
    }
    // horizontal principal axes
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for c in &centres {
        let d = c - centroid;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut major = [theta.cos(), theta.sin()];
    let minor = [-major[1], major[0]];
    let skew: f64 = centres
        .iter()
        .map(|c| ((c.x - centroid.x) * major[0] + (c.y - centroid.y) * major[1]).powi(3))
        .sum();
    if skew < 0.0 {
        major = [-major[0], -major[1]];
    }
    let mut column = vec![0usize; r * r];
    let mut layer = vec![0usize; r];
    for p in &pos {
        column[p[1] * r + p[0]] += 1;
        layer[p[2]] += 1;
    }
    let height = hi.z - lo.z + 1.0 / r as f64;
    for (k, (p, c)) in pos.iter().zip(&centres).enumerate() {
        let row = &mut features[k * GEOMETRY_DIM..(k + 1) * GEOMETRY_DIM];
        for (slot, radius) in [(0usize, 1i64), (1, 2), (2, 3)] {
            let mut count = 0.0;
            neighbourhood(p, radius, r, |u| {
                if mask[linear_index(&u, r)] {
                    count += 1.0;
                }
            });
            row[slot] = count / (2 * radius + 1).pow(3) as f64;
        }
        let d = c - centroid;
        row[3] = d.x / ext;
        row[4] = d.y / ext;
        row[5] = d.z / ext;
        row[6] = (d.x * major[0] + d.y * major[1]) / ext;
        row[7] = (d.x * minor[0] + d.y * minor[1]).abs() / ext;
        row[8] = (c.z - lo.z) / height;
        row[9] = column[p[1] * r + p[0]] as f64 / r as f64;
        row[10] = layer[p[2]] as f64 / n as f64;
        row[11] = hi.x - lo.x;
        row[12] = hi.y - lo.y;
        row[13] = hi.z - lo.z;
        row[14] = n as f64 * 8.0 / (r * r * r) as f64;
    }
    GeometryContext {
        resolution: r,
        positions: pos,
        features,
    }
}

impl GeometryContext {
    /// Token matrix for sparse state `a_t`: `[a_t * c_in, PE, geometry]`.
    pub fn tokens(
        &self,
        state: &[f64],
        c_in: f64,
        pe: &[f64],
        pe_dim: usize,
    ) -> Result<Vec<f64>, NetError> {
        let n = self.positions.len();
        if state.len() != n {
            return Err(NetError::Shape(format!(
                "state {} for {n} tokens",
                state.len()
            )));
        }
        let r = self.resolution;
        let td = 1 + pe_dim + GEOMETRY_DIM;
        let mut out = vec![0.0; n * td];
        for k in 0..n {
            let li = linear_index(&self.positions[k], r);
            let row = &mut out[k * td..(k + 1) * td];
            row[0] = state[k] * c_in;
            row[1..1 + pe_dim].copy_from_slice(&pe[li * pe_dim..(li + 1) * pe_dim]);
            row[1 + pe_dim..]
                .copy_from_slice(&self.features[k * GEOMETRY_DIM..(k + 1) * GEOMETRY_DIM]);
        }
        Ok(out)
    }
}

/// Uniformly random viewpoint on the upper hemisphere of radius 2 around
/// the origin, using the evaluation camera.
pub fn random_hemisphere_view<R: Rng + ?Sized>(
    rng: &mut R,
    intrinsics: &CameraIntrinsics,
) -> Result<Viewpoint, NetError> {
    let z: f64 = rng.random();
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let s = (1.0 - z * z).max(0.0).sqrt();
    let origin = Vec3::new(s * phi.cos(), s * phi.sin(), z) * EVAL_RADIUS;
    Ok(Viewpoint::new(
        *intrinsics,
        look_at_world_up(&origin, &Vec3::zeros())?,
    ))
}

/// Render, back-project and fuse the given views of an object whose
/// occupancy is known.
pub fn observe(
    obj: &SyntheticObject,
    occupancy: &Occupancy,
    views: &[Viewpoint],
    channels: usize,
) -> Result<SparseVoxelGrid, NetError> {
    let r = occupancy.resolution();
    let grids = views
        .iter()
        .map(|v| {
            let (d, f) = render_observation(obj, occupancy, v, channels)?;
            Ok(backproject_view(&d, &f, v, r)?)
        })
        .collect::<Result<Vec<_>, NetError>>()?;
    Ok(fuse(&grids)?)
}

fn clip_and_flatten(grads: &[Dense], clip: Option<f64>) -> Vec<f64> {
    let mut flat = flatten_grads(grads);
    if let Some(c) = clip {
        let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > c {
            let s = c / norm;
            flat.iter_mut().for_each(|g| *g *= s);
        }
    }
    flat
}

/// Optimizer loop shared by both models. Each batch element gets its own
/// RNG seeded from the master stream, so results do not depend on thread
/// scheduling.
fn train_loop<F>(
    model: &mut VelocityModel,
    cfg: &TrainerConfig,
    make_sample: F,
) -> Result<LossCurve, NetError>
where
    F: Fn(&mut ChaCha8Rng) -> Result<TrainSample, NetError> + Sync,
{
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0c47);
    let mut adam = Adam::new(model.param_count(), cfg.learning_rate, cfg.adam.clone());
    let mut params = model.params_flat();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let seeds: Vec<u64> = (0..cfg.batch_size).map(|_| master.random()).collect();
        let batch: Vec<TrainSample> = seeds
            .par_iter()
            .map(|&s| make_sample(&mut ChaCha8Rng::seed_from_u64(s)))
            .collect::<Result<_, _>>()?;
        let (loss, grads) = model.batch_loss_grad(&batch)?;
        if !loss.is_finite() {
            return Err(NetError::NonFinite("loss"));
        }
        losses.push(loss);
        let flat = clip_and_flatten(&grads, cfg.grad_clip);
        adam.step(&mut params, &flat);
        model.set_params_flat(&params)?;
        model.trained_steps += 1;
    }
    model.training = serde_json::to_value(cfg).ok();
    Ok(LossCurve { losses })
}

/// Untrained structure model with the layout implied by `cfg` and `flow_cfg`.
pub fn init_structure_model(
    cfg: &TrainerConfig,
    flow_cfg: &FlowConfig,
) -> Result<VelocityModel, NetError> {
    let meta = ModelMeta {
        resolution: cfg.resolution,
        channels: cfg.channels,
        pe_dim: cfg.pe_dim,
        noise_std: flow_cfg.epsilon_std(),
        target_scale: flow_cfg.target_scale(),
    };
    let mut m = VelocityModel::new(ModelKind::Structure, structure_dims(cfg), meta, cfg.seed)?;
    m.parametrization = cfg.parametrization;
    Ok(m)
}

/// Untrained affordance model.
pub fn init_affordance_model(
    cfg: &TrainerConfig,
    flow_cfg: &FlowConfig,
    query_dim: usize,
) -> Result<VelocityModel, NetError> {
    let meta = ModelMeta {
        resolution: cfg.resolution,
        channels: cfg.channels,
        pe_dim: cfg.pe_dim,
        noise_std: flow_cfg.epsilon_std(),
        target_scale: flow_cfg.target_scale(),
    };
    let mut m = VelocityModel::new(
        ModelKind::Affordance,
        affordance_dims(cfg, query_dim),
        meta,
        cfg.seed,
    )?;
    m.parametrization = cfg.parametrization;
    Ok(m)
}

/// Build one structure training example.
#[allow(clippy::too_many_arguments)]
fn structure_sample(
    rng: &mut ChaCha8Rng,
    dataset: &[SyntheticObject],
    occupancies: &[Occupancy],
    cfg: &TrainerConfig,
    flow_cfg: &FlowConfig,
    intrinsics: &CameraIntrinsics,
    pe: &[f64],
) -> Result<TrainSample, NetError> {
    let i = rng.random_range(0..dataset.len());
    let k = rng.random_range(cfg.view_range.0..=cfg.view_range.1);
    let views = (0..k)
        .map(|_| random_hemisphere_view(rng, intrinsics))
        .collect::<Result<Vec<_>, _>>()?;
    let drop = rng.random::<f64>() < cfg.cfg_dropout;
    let ctx = if drop {
        StructureContext::unconditional(cfg.resolution, cfg.channels)
    } else {
        StructureContext::from_grid(&observe(
            &dataset[i],
            &occupancies[i],
            &views,
            cfg.channels,
        )?)?
    };
    let t = flow::sample_timestep(rng);
    let x0: Vec<f64> = occupancies[i]
        .to_dense()
        .into_values()
        .iter()
        .map(|v| v * flow_cfg.target_scale())
        .collect();
    let eps = flow_cfg.sample_noise(x0.len(), rng);
    let x_t = flow::interpolate(&x0, &eps, t)?;
    let c_in = input_scale(t, flow_cfg.epsilon_std(), flow_cfg.target_scale());
    let tokens = ctx.tokens(&x_t, c_in, pe, cfg.pe_dim)?;
    Ok(TrainSample {
        tokens,
        pooled: ctx.pooled,
        t,
        x0,
        eps,
        mask: None,
    })
}

/// Train the dense structure model; returns the model and its loss curve.
pub fn train_structure(
    dataset: &[SyntheticObject],
    cfg: &TrainerConfig,
    flow_cfg: &FlowConfig,
) -> Result<(VelocityModel, LossCurve), NetError> {
    if dataset.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    cfg.validate()?;
    flow_cfg.validate()?;
    let mut model = init_structure_model(cfg, flow_cfg)?;
    let occupancies = dataset
        .iter()
        .map(|o| occupancy_set(o, cfg.resolution))
        .collect::<Result<Vec<_>, _>>()?;
    let intrinsics = CameraIntrinsics::evaluation(cfg.image_size)?;
    let pe = pe_table(cfg.resolution, cfg.pe_dim)?;
    let curve = train_loop(&mut model, cfg, |rng| {
        structure_sample(rng, dataset, &occupancies, cfg, flow_cfg, &intrinsics, &pe)
    })?;
    Ok((model, curve))
}

struct AffordanceItem {
    geometry: GeometryContext,
    /// (query embedding, binary mask in token order)
    queries: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Train the sparse affordance model on ground-truth occupancy.
pub fn train_affordance(
    dataset: &[SyntheticObject],
    table: &QueryTable,
    cfg: &TrainerConfig,
    flow_cfg: &FlowConfig,
) -> Result<(VelocityModel, LossCurve), NetError> {
    if dataset.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    cfg.validate()?;
    flow_cfg.validate()?;
    let mut model = init_affordance_model(cfg, flow_cfg, table.dim)?;
    let pe = pe_table(cfg.resolution, cfg.pe_dim)?;
    let items = dataset
        .iter()
        .map(|obj| {
            let occ = occupancy_set(obj, cfg.resolution)?;
            let queries = table.queries_for(obj);
            if queries.is_empty() {
                return Err(NetError::MissingQueries(obj.object_id.clone()));
            }
            let queries = queries
                .iter()
                .map(|q| {
                    let heat = ground_truth_affordance(obj, q, table, cfg.resolution)?;
                    Ok((table.lookup(q)?.embedding.clone(), heat.values))
                })
                .collect::<Result<Vec<_>, NetError>>()?;
            Ok(AffordanceItem {
                geometry: geometry_context(&occ),
                queries,
            })
        })
        .collect::<Result<Vec<_>, NetError>>()?;
    let curve = train_loop(&mut model, cfg, |rng| {
        let item = &items[rng.random_range(0..items.len())];
        let (emb, mask) = &item.queries[rng.random_range(0..item.queries.len())];
        let pooled = if rng.random::<f64>() < cfg.cfg_dropout {
            vec![0.0; emb.len()]
        } else {
            emb.clone()
        };
        let t = flow::sample_timestep(rng);
        let x0: Vec<f64> = mask
            .iter()
            .map(|g| (2.0 * g - 1.0) * flow_cfg.target_scale())
            .collect();
        let eps = flow_cfg.sample_noise(x0.len(), rng);
        let x_t = flow::interpolate(&x0, &eps, t)?;
        let c_in = input_scale(t, flow_cfg.epsilon_std(), flow_cfg.target_scale());
        let tokens = item.geometry.tokens(&x_t, c_in, &pe, cfg.pe_dim)?;
        Ok(TrainSample {
            tokens,
            pooled,
            t,
            x0,
            eps,
            mask: Some(mask.clone()),
        })
    })?;
    Ok((model, curve))
}
