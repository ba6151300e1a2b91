//! Densely connected feed-forward regression network with a heteroscedastic
//! head, trained by Gaussian negative log-likelihood.
//!
//! Layout: a stem layer maps the input to `initial_features` channels. Each
//! dense block then appends `growth_rate` channels per layer, every layer
//! reading the concatenation of the block input and all earlier layer
//! outputs. A transition layer compresses each block's output back to
//! `initial_features` before the next block. The head emits a mean and a raw
//! variance channel; the variance is `softplus(raw) + variance_floor`.
//!
//! Gradients are computed by a hand-written reverse pass over the cached
//! activations. Concatenation is free: each block keeps one row-major buffer
//! whose column ranges are owned by successive layers.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hyperspace::TrainingConfig;
use crate::rng::{self, StreamRng};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-8;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("input dimension mismatch: network expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("buffer of length {len} is not a whole number of rows of width {width}")]
    RaggedInput { len: usize, width: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(&'static str),
    #[error("prediction/target length mismatch ({predictions} vs {targets})")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    ParameterCount { expected: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid training option: {0}")]
    InvalidOption(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (loss {loss}); returning last finite checkpoint")]
    NonFinite { epoch: usize, batch: usize, loss: f64, checkpoint: Box<TrainState> },
}

/// Architecture of one ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetSpec {
    pub input_dim: usize,
    pub block_layers: Vec<usize>,
    pub growth_rate: usize,
    pub initial_features: usize,
    pub drop_rate: f64,
    pub variance_floor: f64,
}

impl DenseNetSpec {
    /// Builds a spec from a training configuration. Channel counts are
    /// divided by `width_divisor` (rounded up); a divisor of 1 keeps them.
    pub fn from_training(input_dim: usize, cfg: &TrainingConfig, width_divisor: usize) -> Self {
        let div = width_divisor.max(1);
        Self {
            input_dim,
            block_layers: cfg.block_layers.clone(),
            growth_rate: cfg.growth_rate.div_ceil(div),
            initial_features: cfg.initial_features.div_ceil(div),
            drop_rate: cfg.drop_rate,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 {
            return Err(NetError::InvalidSpec("input_dim must be positive"));
        }
        if self.block_layers.is_empty() || self.block_layers.contains(&0) {
            return Err(NetError::InvalidSpec("every dense block needs at least one layer"));
        }
        if self.growth_rate == 0 || self.initial_features == 0 {
            return Err(NetError::InvalidSpec("growth rate and initial features must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(NetError::InvalidSpec("drop rate must lie in [0, 1)"));
        }
        if !(self.variance_floor > 0.0) {
            return Err(NetError::InvalidSpec("variance floor must be positive"));
        }
        Ok(())
    }

    /// Input width of layer `k` (0-based) in a dense block.
    pub fn layer_input_width(&self, k: usize) -> usize {
        self.initial_features + k * self.growth_rate
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, f, g) = (self.input_dim, self.initial_features, self.growth_rate);
        let mut n = (d + 1) * f;
        let blocks = self.block_layers.len();
        for (b, &l) in self.block_layers.iter().enumerate() {
            // sum_{k<l} (f + k g + 1) g
            n += g * (l * (f + 1) + g * l * (l - 1) / 2);
            let width = f + l * g;
            if b + 1 < blocks {
                n += (width + 1) * f;
            } else {
                n += (width + 1) * 2;
            }
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub offset: usize,
}

impl Linear {
    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.input * self.output]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        let s = self.offset + self.input * self.output;
        &p[s..s + self.output]
    }

    fn param_count(&self) -> usize {
        (self.input + 1) * self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    width: usize,
    layers: Vec<Linear>,
    transition: Option<Linear>,
}

/// Layer-by-layer enumeration of a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    stem: Linear,
    blocks: Vec<Block>,
    head: Linear,
    n_params: usize,
}

impl Topology {
    pub fn new(spec: &DenseNetSpec) -> Self {
        let mut offset = 0;
        let mut take = |input: usize, output: usize| {
            let l = Linear { input, output, offset };
            offset += l.param_count();
            l
        };
        let f = spec.initial_features;
        let g = spec.growth_rate;
        let stem = take(spec.input_dim, f);
        let n_blocks = spec.block_layers.len();
        let mut blocks = Vec::with_capacity(n_blocks);
        for (b, &l) in spec.block_layers.iter().enumerate() {
            let layers = (0..l).map(|k| take(f + k * g, g)).collect();
            let width = f + l * g;
            let transition = (b + 1 < n_blocks).then(|| take(width, f));
            blocks.push(Block { width, layers, transition });
        }
        let head = take(blocks.last().map_or(f, |b| b.width), 2);
        Self { stem, blocks, head, n_params: offset }
    }

    pub fn parameter_count(&self) -> usize {
        self.n_params
    }

    /// All affine layers in parameter order.
    pub fn layers(&self) -> Vec<Linear> {
        let mut out = alloc::vec![self.stem];
        for b in &self.blocks {
            out.extend(b.layers.iter().copied());
            out.extend(b.transition);
        }
        out.push(self.head);
        out
    }

    /// Mask of parameters subject to weight decay (weights, not biases).
    fn decay_mask(&self) -> Vec<bool> {
        let mut mask = alloc::vec![false; self.n_params];
        for l in self.layers() {
            for m in &mut mask[l.offset..l.offset + l.input * l.output] {
                *m = true;
            }
        }
        mask
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        libm::exp(x)
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softplus_inverse(y: f64) -> f64 {
    libm::log(libm::expm1(y))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn affine(layer: &Linear, params: &[f64], input: &[f64], out: &mut [f64]) {
    let w = layer.weights(params);
    let b = layer.bias(params);
    for (j, o) in out.iter_mut().enumerate() {
        *o = b[j] + dot(&w[j * layer.input..(j + 1) * layer.input], input);
    }
}

/// Accumulates weight/bias gradients for one row and optionally the input gradient.
#[inline]
fn affine_backward(
    layer: &Linear,
    params: &[f64],
    grad: &mut [f64],
    input: &[f64],
    dz: &[f64],
    mut d_input: Option<&mut [f64]>,
) {
    let w = layer.weights(params);
    let n_in = layer.input;
    let (gw, gb) = grad[layer.offset..layer.offset + layer.param_count()].split_at_mut(n_in * layer.output);
    for (j, &d) in dz.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        axpy(&mut gw[j * n_in..(j + 1) * n_in], d, input);
        gb[j] += d;
        if let Some(di) = d_input.as_deref_mut() {
            axpy(di, d, &w[j * n_in..(j + 1) * n_in]);
        }
    }
}

/// Activation cache for one batch.
#[derive(Debug, Clone, Default)]
struct Workspace {
    rows: usize,
    stem_in: Vec<f64>,
    blocks: Vec<Vec<f64>>,
    head: Vec<f64>,
    d_blocks: Vec<Vec<f64>>,
    dropout_scale: Option<f64>,
    scratch: Vec<f64>,
}

/// Per-point mean and variance of one member (a "field" over a batch).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MemberPrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl MemberPrediction {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Value and output-gradients of the summed Gaussian NLL.
#[derive(Debug, Clone, PartialEq)]
pub struct NllLoss {
    pub value: f64,
    pub d_mean: Vec<f64>,
    pub d_variance: Vec<f64>,
}

/// `C = sum_n (y_n - mu_n)^2 / (2 var_n) + ln(var_n) / 2` with its gradient
/// with respect to each mean and variance.
pub fn nll_loss(pred: &MemberPrediction, y: &[f64]) -> Result<NllLoss, NetError> {
    if pred.mean.len() != y.len() || pred.variance.len() != y.len() {
        return Err(NetError::LengthMismatch { predictions: pred.mean.len(), targets: y.len() });
    }
    let mut value = 0.0;
    let mut d_mean = Vec::with_capacity(y.len());
    let mut d_variance = Vec::with_capacity(y.len());
    for ((&mu, &var), &t) in pred.mean.iter().zip(&pred.variance).zip(y) {
        let r = t - mu;
        value += r * r / (2.0 * var) + 0.5 * libm::log(var);
        d_mean.push(-r / var);
        d_variance.push(0.5 / var - r * r / (2.0 * var * var));
    }
    Ok(NllLoss { value, d_mean, d_variance })
}

/// Spec plus flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: DenseNetSpec,
    topology: Topology,
    params: Vec<f64>,
}

impl Network {
    /// He-uniform hidden weights, Glorot-uniform head, zero hidden biases;
    /// the variance bias starts at `softplus^-1(1)`.
    pub fn init(spec: DenseNetSpec, seed: u64) -> Result<Self, NetError> {
        spec.validate()?;
        let topology = Topology::new(&spec);
        let mut params = alloc::vec![0.0; topology.parameter_count()];
        let mut rng = rng::stream(seed, &[0x1417]);
        let layers = topology.layers();
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            let limit = if i == last {
                libm::sqrt(6.0 / (l.input + l.output) as f64)
            } else {
                libm::sqrt(6.0 / l.input as f64)
            };
            for w in &mut params[l.offset..l.offset + l.input * l.output] {
                *w = limit * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        let head_bias = topology.head.offset + topology.head.input * 2;
        params[head_bias + 1] = softplus_inverse(1.0);
        Ok(Self { spec, topology, params })
    }

    pub fn from_parameters(spec: DenseNetSpec, params: Vec<f64>) -> Result<Self, NetError> {
        spec.validate()?;
        let topology = Topology::new(&spec);
        if params.len() != topology.parameter_count() {
            return Err(NetError::ParameterCount { expected: topology.parameter_count(), got: params.len() });
        }
        Ok(Self { spec, topology, params })
    }

    pub fn spec(&self) -> &DenseNetSpec {
        &self.spec
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, inputs: &[f64], dim: usize) -> Result<usize, NetError> {
        if dim != self.spec.input_dim {
            return Err(NetError::DimensionMismatch { expected: self.spec.input_dim, got: dim });
        }
        if inputs.len() % dim != 0 {
            return Err(NetError::RaggedInput { len: inputs.len(), width: dim });
        }
        Ok(inputs.len() / dim)
    }

    /// Forward pass in normalized units. Dropout masks are drawn from
    /// `dropout` when it is provided (training mode).
    pub fn forward(
        &self,
        inputs: &[f64],
        dim: usize,
        dropout: Option<&mut StreamRng>,
    ) -> Result<MemberPrediction, NetError> {
        let rows = self.check_input(inputs, dim)?;
        let mut ws = Workspace::default();
        self.forward_ws(&self.params, inputs, rows, &mut ws, dropout);
        Ok(self.read_head(&ws))
    }

    fn read_head(&self, ws: &Workspace) -> MemberPrediction {
        let mut pred = MemberPrediction {
            mean: Vec::with_capacity(ws.rows),
            variance: Vec::with_capacity(ws.rows),
        };
        for r in ws.head.chunks_exact(2).take(ws.rows) {
            pred.mean.push(r[0]);
            pred.variance.push(softplus(r[1]) + self.spec.variance_floor);
        }
        pred
    }

    fn forward_ws(&self, params: &[f64], inputs: &[f64], rows: usize, ws: &mut Workspace, mut dropout: Option<&mut StreamRng>) {
        let topo = &self.topology;
        let spec = &self.spec;
        let f = spec.initial_features;
        let g = spec.growth_rate;
        ws.rows = rows;
        ws.stem_in.clear();
        ws.stem_in.extend_from_slice(inputs);
        ws.blocks.resize_with(topo.blocks.len(), Vec::new);
        for (buf, b) in ws.blocks.iter_mut().zip(&topo.blocks) {
            buf.clear();
            buf.resize(rows * b.width, 0.0);
        }
        ws.head.clear();
        ws.head.resize(rows * 2, 0.0);
        let p_drop = spec.drop_rate;
        let use_dropout = dropout.is_some() && p_drop > 0.0;
        ws.dropout_scale = use_dropout.then(|| 1.0 / (1.0 - p_drop));
        let keep_scale = ws.dropout_scale.unwrap_or(1.0);

        let w0 = topo.blocks[0].width;
        for n in 0..rows {
            let x = &inputs[n * spec.input_dim..(n + 1) * spec.input_dim];
            let out = &mut ws.blocks[0][n * w0..n * w0 + f];
            affine(&topo.stem, params, x, out);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        for bi in 0..topo.blocks.len() {
            let block = &topo.blocks[bi];
            let w = block.width;
            for (k, layer) in block.layers.iter().enumerate() {
                let in_w = f + k * g;
                for n in 0..rows {
                    let row = &mut ws.blocks[bi][n * w..(n + 1) * w];
                    let (inp, rest) = row.split_at_mut(in_w);
                    let out = &mut rest[..g];
                    affine(layer, params, inp, out);
                    for v in out.iter_mut() {
                        let a = v.max(0.0);
                        *v = match dropout.as_deref_mut() {
                            Some(rng) if use_dropout => {
                                if rng.random::<f64>() < p_drop {
                                    0.0
                                } else {
                                    a * keep_scale
                                }
                            }
                            _ => a,
                        };
                    }
                }
            }
            if let Some(t) = &block.transition {
                let next_w = topo.blocks[bi + 1].width;
                let (cur, next) = ws.blocks.split_at_mut(bi + 1);
                for n in 0..rows {
                    let inp = &cur[bi][n * w..(n + 1) * w];
                    let out = &mut next[0][n * next_w..n * next_w + f];
                    affine(t, params, inp, out);
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
        }
        let last = topo.blocks.len() - 1;
        let wl = topo.blocks[last].width;
        for n in 0..rows {
            let inp = &ws.blocks[last][n * wl..(n + 1) * wl];
            affine(&topo.head, params, inp, &mut ws.head[n * 2..n * 2 + 2]);
        }
    }

    /// Reverse pass. `d_head` holds dC/d(mean, raw variance) per row;
    /// parameter gradients are accumulated into `grad`.
    fn backward_ws(&self, params: &[f64], ws: &mut Workspace, d_head: &[f64], grad: &mut [f64]) {
        let topo = &self.topology;
        let f = self.spec.initial_features;
        let g = self.spec.growth_rate;
        let rows = ws.rows;
        ws.d_blocks.resize_with(topo.blocks.len(), Vec::new);
        for (buf, b) in ws.d_blocks.iter_mut().zip(&topo.blocks) {
            buf.clear();
            buf.resize(rows * b.width, 0.0);
        }
        let last = topo.blocks.len() - 1;
        let wl = topo.blocks[last].width;
        for n in 0..rows {
            let inp = &ws.blocks[last][n * wl..(n + 1) * wl];
            let d_in = &mut ws.d_blocks[last][n * wl..(n + 1) * wl];
            affine_backward(&topo.head, params, grad, inp, &d_head[n * 2..n * 2 + 2], Some(d_in));
        }
        let keep_scale = ws.dropout_scale.unwrap_or(1.0);
        ws.scratch.resize(g.max(f), 0.0);
        for bi in (0..topo.blocks.len()).rev() {
            let block = &topo.blocks[bi];
            let w = block.width;
            for (k, layer) in block.layers.iter().enumerate().rev() {
                let in_w = f + k * g;
                for n in 0..rows {
                    let row = &ws.blocks[bi][n * w..(n + 1) * w];
                    let drow = &mut ws.d_blocks[bi][n * w..(n + 1) * w];
                    let (d_inp, d_rest) = drow.split_at_mut(in_w);
                    let dz = &mut ws.scratch[..g];
                    let mut any = false;
                    for ((d, &o), &dout) in dz.iter_mut().zip(&row[in_w..in_w + g]).zip(&d_rest[..g]) {
                        *d = if o > 0.0 { dout * keep_scale } else { 0.0 };
                        any |= *d != 0.0;
                    }
                    if any {
                        affine_backward(layer, params, grad, &row[..in_w], dz, Some(d_inp));
                    }
                }
            }
            // gradient w.r.t. this block's input columns is complete
            let (prev, cur) = ws.d_blocks.split_at_mut(bi);
            let dz = &mut ws.scratch[..f];
            if bi == 0 {
                let d = self.spec.input_dim;
                for n in 0..rows {
                    let out = &ws.blocks[0][n * w..n * w + f];
                    for ((z, &o), &dout) in dz.iter_mut().zip(out).zip(&cur[0][n * w..n * w + f]) {
                        *z = if o > 0.0 { dout } else { 0.0 };
                    }
                    affine_backward(&topo.stem, params, grad, &ws.stem_in[n * d..(n + 1) * d], dz, None);
                }
            } else {
                let t = topo.blocks[bi - 1].transition.as_ref().expect("transition between blocks");
                let pw = topo.blocks[bi - 1].width;
                for n in 0..rows {
                    let out = &ws.blocks[bi][n * w..n * w + f];
                    for ((z, &o), &dout) in dz.iter_mut().zip(out).zip(&cur[0][n * w..n * w + f]) {
                        *z = if o > 0.0 { dout } else { 0.0 };
                    }
                    let inp = &ws.blocks[bi - 1][n * pw..(n + 1) * pw];
                    let d_inp = &mut prev[bi - 1][n * pw..(n + 1) * pw];
                    affine_backward(t, params, grad, inp, dz, Some(d_inp));
                }
            }
        }
    }

    /// Summed NLL over the batch and its exact gradient with respect to all
    /// parameters (normalized units).
    pub fn nll_gradient(
        &self,
        inputs: &[f64],
        dim: usize,
        targets: &[f64],
        dropout: Option<&mut StreamRng>,
    ) -> Result<(f64, Vec<f64>), NetError> {
        let rows = self.check_input(inputs, dim)?;
        let mut ws = Workspace::default();
        let mut grad = alloc::vec![0.0; self.params.len()];
        let loss = self.loss_and_grad_ws(&self.params, inputs, targets, rows, &mut ws, &mut grad, dropout, 1.0)?;
        Ok((loss.0, grad))
    }

    /// Returns (summed NLL, summed squared error of the mean).
    #[allow(clippy::too_many_arguments)]
    fn loss_and_grad_ws(
        &self,
        params: &[f64],
        inputs: &[f64],
        targets: &[f64],
        rows: usize,
        ws: &mut Workspace,
        grad: &mut [f64],
        dropout: Option<&mut StreamRng>,
        grad_scale: f64,
    ) -> Result<(f64, f64), NetError> {
        if targets.len() != rows {
            return Err(NetError::LengthMismatch { predictions: rows, targets: targets.len() });
        }
        self.forward_ws(params, inputs, rows, ws, dropout);
        let floor = self.spec.variance_floor;
        let mut d_head = alloc::vec![0.0; rows * 2];
        let mut loss = 0.0;
        let mut sse = 0.0;
        for (n, &y) in targets.iter().enumerate() {
            let mu = ws.head[2 * n];
            let raw = ws.head[2 * n + 1];
            let var = softplus(raw) + floor;
            let r = y - mu;
            loss += r * r / (2.0 * var) + 0.5 * libm::log(var);
            sse += r * r;
            d_head[2 * n] = grad_scale * (-r / var);
            d_head[2 * n + 1] = grad_scale * (0.5 / var - r * r / (2.0 * var * var)) * sigmoid(raw);
        }
        self.backward_ws(params, ws, &d_head, grad);
        Ok((loss, sse))
    }
}

/// Affine map between raw and normalized target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: f64,
    pub std: f64,
}

impl TargetScale {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };

    /// Population mean and standard deviation; a constant set gets std 1.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::IDENTITY;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = libm::sqrt(var);
        Self { mean, std: if std > 0.0 && std.is_finite() { std } else { 1.0 } }
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Group of consecutive samples sharing one timestep (one field frame).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub timestep: u64,
    pub start: usize,
    pub len: usize,
}

/// Row-major feature matrix with raw targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub dim: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub groups: Vec<SampleGroup>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

/// Re-draws training targets each epoch (raw units).
pub trait TargetNoise {
    /// Writes perturbed targets for `set` at `epoch` into `out`.
    fn perturb(&self, epoch: u64, set: &SampleSet, out: &mut [f64]);
}

/// A trained member: network in normalized units plus the target scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub target_scale: TargetScale,
}

impl TrainedModel {
    /// Inference-mode prediction in raw target units.
    pub fn predict(&self, inputs: &[f64], dim: usize) -> Result<MemberPrediction, NetError> {
        let rows = self.network.check_input(inputs, dim)?;
        let mut out = MemberPrediction { mean: Vec::with_capacity(rows), variance: Vec::with_capacity(rows) };
        let mut ws = Workspace::default();
        let s = self.target_scale;
        const CHUNK: usize = 512;
        for chunk in inputs.chunks(CHUNK * dim) {
            let r = chunk.len() / dim;
            self.network.forward_ws(&self.network.params, chunk, r, &mut ws, None);
            let p = self.network.read_head(&ws);
            out.mean.extend(p.mean.iter().map(|m| s.denormalize(*m)));
            out.variance.extend(p.variance.iter().map(|v| v * s.std * s.std));
        }
        Ok(out)
    }

    pub fn predict_set(&self, set: &SampleSet) -> Result<MemberPrediction, NetError> {
        self.predict(&set.inputs, set.dim)
    }
}

/// Adaptive-moment state with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: u64,
    decay_mask: Vec<bool>,
}

impl AdamState {
    pub fn new(topology: &Topology) -> Self {
        let n = topology.parameter_count();
        Self { first: alloc::vec![0.0; n], second: alloc::vec![0.0; n], steps: 0, decay_mask: topology.decay_mask() }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        let (b1, b2) = ADAM_BETAS;
        self.steps += 1;
        let c1 = 1.0 - libm::pow(b1, self.steps as f64);
        let c2 = 1.0 - libm::pow(b2, self.steps as f64);
        for i in 0..params.len() {
            let g = grad[i];
            let m = b1 * self.first[i] + (1.0 - b1) * g;
            let v = b2 * self.second[i] + (1.0 - b2) * g * g;
            self.first[i] = m;
            self.second[i] = v;
            let update = (m / c1) / (libm::sqrt(v / c2) + ADAM_EPSILON);
            let decay = if self.decay_mask[i] { weight_decay * params[i] } else { 0.0 };
            params[i] -= lr * (update + decay);
        }
    }
}

/// Everything needed to resume or inspect training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: TrainedModel,
    pub optimizer: AdamState,
    pub epoch: usize,
    pub seed: u64,
    pub shuffle_rng: StreamRng,
    pub dropout_rng: StreamRng,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// RMSE of the training-mode predictions seen during the epoch (raw units).
    pub train_rmse: f64,
    pub validation_rmse: Option<f64>,
    /// Mean NLL per sample over the epoch (normalized units).
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub trace: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn model(&self) -> &TrainedModel {
        &self.state.model
    }

    pub fn into_model(self) -> TrainedModel {
        self.state.model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl TrainOptions {
    pub fn from_config(cfg: &TrainingConfig, epochs: usize, seed: u64) -> Self {
        Self { epochs, seed, learning_rate: cfg.learning_rate, weight_decay: cfg.weight_decay, batch_size: cfg.batch_size }
    }
}

/// RMSE between raw targets and predicted means.
fn rmse_of(pred: &[f64], y: &[f64]) -> f64 {
    let sse: f64 = pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum();
    libm::sqrt(sse / y.len().max(1) as f64)
}

/// Minibatch training with per-epoch reshuffling. When `noise` is given,
/// training targets are re-drawn at the start of every epoch.
pub fn train(
    spec: DenseNetSpec,
    train_set: &SampleSet,
    validation: Option<&SampleSet>,
    options: &TrainOptions,
    noise: Option<&dyn TargetNoise>,
) -> Result<TrainOutcome, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if options.batch_size == 0 {
        return Err(TrainError::InvalidOption("batch size must be positive"));
    }
    if !(options.learning_rate > 0.0) || !(options.weight_decay >= 0.0) {
        return Err(TrainError::InvalidOption("learning rate must be positive and weight decay non-negative"));
    }
    if train_set.dim != spec.input_dim {
        return Err(NetError::DimensionMismatch { expected: spec.input_dim, got: train_set.dim }.into());
    }
    let network = Network::init(spec, rng::derive_seed(options.seed, &[0]))?;
    let target_scale = TargetScale::fit(&train_set.targets);
    let optimizer = AdamState::new(network.topology());
    let mut state = TrainState {
        model: TrainedModel { network, target_scale },
        optimizer,
        epoch: 0,
        seed: options.seed,
        shuffle_rng: rng::stream(options.seed, &[1]),
        dropout_rng: rng::stream(options.seed, &[2]),
    };
    let n = train_set.len();
    let dim = train_set.dim;
    let mut order: Vec<usize> = (0..n).collect();
    let mut raw_targets = train_set.targets.clone();
    let mut batch_x = Vec::with_capacity(options.batch_size * dim);
    let mut batch_y = Vec::with_capacity(options.batch_size);
    let mut ws = Workspace::default();
    let mut grad = alloc::vec![0.0; state.model.network.params.len()];
    let mut trace = Vec::with_capacity(options.epochs);
    let mut checkpoint = state.clone();

    for epoch in 0..options.epochs {
        if let Some(noise) = noise {
            noise.perturb(epoch as u64, train_set, &mut raw_targets);
        }
        order.shuffle(&mut state.shuffle_rng);
        let mut loss_sum = 0.0;
        let mut sse_sum = 0.0;
        for (bi, chunk) in order.chunks(options.batch_size).enumerate() {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.extend_from_slice(train_set.row(i));
                batch_y.push(target_scale.normalize(raw_targets[i]));
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let net = &state.model.network;
            let (loss, sse) = net.loss_and_grad_ws(
                &net.params,
                &batch_x,
                &batch_y,
                chunk.len(),
                &mut ws,
                &mut grad,
                Some(&mut state.dropout_rng),
                1.0 / chunk.len() as f64,
            )?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch: bi, loss, checkpoint: Box::new(checkpoint) });
            }
            loss_sum += loss;
            sse_sum += sse;
            state.optimizer.step(&mut state.model.network.params, &grad, options.learning_rate, options.weight_decay);
        }
        if state.model.network.params.iter().any(|p| !p.is_finite()) {
            return Err(TrainError::NonFinite { epoch, batch: usize::MAX, loss: f64::NAN, checkpoint: Box::new(checkpoint) });
        }
        state.epoch = epoch + 1;
        let validation_rmse = match validation {
            Some(v) if !v.is_empty() => {
                let p = state.model.predict_set(v)?;
                Some(rmse_of(&p.mean, &v.targets))
            }
            _ => None,
        };
        trace.push(EpochRecord {
            epoch: epoch + 1,
            train_rmse: libm::sqrt(sse_sum / n as f64) * target_scale.std,
            validation_rmse,
            mean_loss: loss_sum / n as f64,
        });
        checkpoint = state.clone();
    }
    Ok(TrainOutcome { state, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> DenseNetSpec {
        DenseNetSpec {
            input_dim: 3,
            block_layers: alloc::vec![2, 3],
            growth_rate: 3,
            initial_features: 4,
            drop_rate: 0.0,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        let spec = toy_spec();
        let topo = Topology::new(&spec);
        let enumerated: usize = topo.layers().iter().map(|l| l.param_count()).sum();
        assert_eq!(enumerated, spec.parameter_count());
        assert_eq!(topo.parameter_count(), spec.parameter_count());
        // block inputs grow by the growth rate
        assert_eq!(topo.blocks[1].layers[2].input, 4 + 2 * 3);
        assert_eq!(topo.head.output, 2);
    }

    #[test]
    fn inference_is_deterministic_and_variance_positive() {
        let net = Network::init(DenseNetSpec { drop_rate: 0.3, ..toy_spec() }, 4).unwrap();
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = net.forward(&x, 3, None).unwrap();
        let b = net.forward(&x, 3, None).unwrap();
        assert_eq!(a, b);
        assert!(a.variance.iter().all(|&v| v >= DEFAULT_VARIANCE_FLOOR));
        let mut rng = rng::stream(1, &[]);
        let c = net.forward(&x, 3, Some(&mut rng)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_weight_network_is_constant() {
        let spec = toy_spec();
        let n = spec.parameter_count();
        let mut net = Network::from_parameters(spec, alloc::vec![0.0; n]).unwrap();
        let head = net.topology().head;
        let hb = head.offset + head.input * 2;
        net.parameters_mut()[hb] = 0.7;
        net.parameters_mut()[hb + 1] = -0.2;
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let p = net.forward(&x, 3, None).unwrap();
        for (m, v) in p.mean.iter().zip(&p.variance) {
            assert_eq!(*m, 0.7);
            assert_eq!(*v, softplus(-0.2) + DEFAULT_VARIANCE_FLOOR);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let net = Network::init(toy_spec(), 0).unwrap();
        assert_eq!(net.forward(&[0.0; 4], 2, None).unwrap_err(), NetError::DimensionMismatch { expected: 3, got: 2 });
        assert_eq!(net.forward(&[0.0; 4], 3, None).unwrap_err(), NetError::RaggedInput { len: 4, width: 3 });
    }

    #[test]
    fn nll_examples() {
        let p = MemberPrediction { mean: alloc::vec![1.0, -2.0], variance: alloc::vec![1.0, 1.0] };
        assert_eq!(nll_loss(&p, &[1.0, -2.0]).unwrap().value, 0.0);
        let single = MemberPrediction { mean: alloc::vec![0.0], variance: alloc::vec![1.0] };
        assert_eq!(nll_loss(&single, &[1.0]).unwrap().value, 0.5);
        assert!(nll_loss(&single, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn nll_output_gradient_matches_differences() {
        let p = MemberPrediction { mean: alloc::vec![0.3], variance: alloc::vec![0.7] };
        let l = nll_loss(&p, &[1.1]).unwrap();
        let eps = 1e-6;
        let f = |m: f64, v: f64| nll_loss(&MemberPrediction { mean: alloc::vec![m], variance: alloc::vec![v] }, &[1.1]).unwrap().value;
        let dm = (f(0.3 + eps, 0.7) - f(0.3 - eps, 0.7)) / (2.0 * eps);
        let dv = (f(0.3, 0.7 + eps) - f(0.3, 0.7 - eps)) / (2.0 * eps);
        assert!((dm - l.d_mean[0]).abs() < 1e-7);
        assert!((dv - l.d_variance[0]).abs() < 1e-7);
    }

    /// Central differences on 32 randomly chosen parameters.
    fn max_fd_error(spec: DenseNetSpec, seed: u64) -> f64 {
        let mut rng = rng::stream(seed, &[9]);
        let mut net = Network::init(spec.clone(), seed).unwrap();
        // random biases so few units sit exactly at a kink
        for p in net.parameters_mut().iter_mut() {
            *p += 0.1 * (rng.random::<f64>() - 0.5);
        }
        let rows = 6;
        let x: Vec<f64> = (0..rows * spec.input_dim).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let y: Vec<f64> = (0..rows).map(|_| rng.random::<f64>() - 0.5).collect();
        let (_, grad) = net.nll_gradient(&x, spec.input_dim, &y, None).unwrap();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for _ in 0..32 {
            let i = rng.random_range(0..grad.len());
            let orig = net.parameters()[i];
            net.parameters_mut()[i] = orig + eps;
            let (up, _) = net.nll_gradient(&x, spec.input_dim, &y, None).unwrap();
            net.parameters_mut()[i] = orig - eps;
            let (down, _) = net.nll_gradient(&x, spec.input_dim, &y, None).unwrap();
            net.parameters_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..4 {
            let err = max_fd_error(toy_spec(), seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn constant_target_is_learned() {
        let xs: Vec<f64> = (0..200).map(|i| i as f64 / 100.0 - 1.0).collect();
        let set = SampleSet { dim: 1, inputs: xs.clone(), targets: alloc::vec![3.0; 200], groups: Vec::new() };
        let spec = DenseNetSpec { input_dim: 1, block_layers: alloc::vec![2], growth_rate: 4, initial_features: 4, drop_rate: 0.0, variance_floor: DEFAULT_VARIANCE_FLOOR };
        let opts = TrainOptions { epochs: 50, seed: 3, learning_rate: 1e-2, weight_decay: 1e-4, batch_size: 16 };
        let out = train(spec, &set, Some(&set), &opts, None).unwrap();
        let val = out.trace.last().unwrap().validation_rmse.unwrap();
        assert!(val < 1e-2 * 3.0, "{val}");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let xs: Vec<f64> = (0..64).map(|i| i as f64 / 32.0 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| libm::sin(3.0 * x)).collect();
        let set = SampleSet { dim: 1, inputs: xs, targets: ys, groups: Vec::new() };
        let spec = DenseNetSpec { input_dim: 1, block_layers: alloc::vec![2, 2], growth_rate: 3, initial_features: 4, drop_rate: 0.2, variance_floor: DEFAULT_VARIANCE_FLOOR };
        let opts = TrainOptions { epochs: 5, seed: 8, learning_rate: 1e-3, weight_decay: 1e-3, batch_size: 8 };
        let a = train(spec.clone(), &set, None, &opts, None).unwrap();
        let b = train(spec, &set, None, &opts, None).unwrap();
        assert_eq!(a.model().network.parameters(), b.model().network.parameters());
        assert_eq!(a.trace, b.trace);
    }
}
