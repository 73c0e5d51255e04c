//! The learned regularizer: four 3x3 convolutions (ReLU after the first
//! three, the last one linear) acting on a block viewed as a `d`-channel
//! `n x n` image, kept 1-Lipschitz per layer by spectral normalization.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::ops::{conv2d, relu};
use crate::autodiff::tensor::dot;
use crate::autodiff::{Conv2d, NodeId, Relu, Tape, Tensor};
use crate::error::{Error, Result};
use crate::train::{Adam, AdamConfig};

pub const LAYERS: usize = 4;
pub const DEFAULT_WIDTH: usize = 64;

/// Power iterations used to settle `(u, v)` when a layer is created.
const SETTLE_ITERS: usize = 500;

/// One 3x3 convolution with its spectral-norm power-iteration state.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    /// Left singular vector estimate, length `c_out`.
    pub u: Vec<f64>,
    /// Right singular vector estimate, length `c_in * 9`.
    pub v: Vec<f64>,
}

impl ConvLayer {
    /// Wraps a weight `[c_out, c_in, 3, 3]` and bias `[c_out]`, running power
    /// iteration to convergence so the first normalization is accurate.
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != 3 || s[3] != 3 {
            return Err(Error::Shape(format!("conv weight must be [co, ci, 3, 3], got {s:?}")));
        }
        if bias.shape() != [s[0]] {
            return Err(Error::Shape(format!("bias {:?} for {} outputs", bias.shape(), s[0])));
        }
        let (co, k) = (s[0], s[1] * 9);
        let mut layer = Self {
            u: (0..co).map(|i| 1.0 + 0.01 * i as f64).collect(),
            v: vec![0.0; k],
            weight,
            bias,
        };
        normalize(&mut layer.u);
        for _ in 0..SETTLE_ITERS {
            layer.power_step();
        }
        Ok(layer)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// One power-iteration step on the `c_out x (c_in*9)` unfolding; returns
    /// the estimate `uᵀ W v`.
    pub fn power_step(&mut self) -> f64 {
        let (co, k) = (self.out_channels(), self.in_channels() * 9);
        let w = self.weight.data();
        let mut v = vec![0.0; k];
        for o in 0..co {
            let uo = self.u[o];
            for (vi, wi) in v.iter_mut().zip(&w[o * k..(o + 1) * k]) {
                *vi += uo * wi;
            }
        }
        if normalize(&mut v) {
            self.v = v;
        }
        let mut u: Vec<f64> = (0..co).map(|o| dot(&w[o * k..(o + 1) * k], &self.v)).collect();
        if normalize(&mut u) {
            self.u = u;
        }
        self.estimated_norm()
    }

    /// `uᵀ W v` with the stored vectors.
    pub fn estimated_norm(&self) -> f64 {
        let k = self.in_channels() * 9;
        let w = self.weight.data();
        (0..self.out_channels())
            .map(|o| self.u[o] * dot(&w[o * k..(o + 1) * k], &self.v))
            .sum()
    }
}

fn normalize(x: &mut [f64]) -> bool {
    let n = dot(x, x).sqrt();
    if n > 0.0 && n.is_finite() {
        x.iter_mut().for_each(|v| *v /= n);
        true
    } else {
        false
    }
}

/// Weights, biases and power-iteration state of the four layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub layers: Vec<ConvLayer>,
}

impl DenoiserParams {
    /// Fan-in scaled uniform weights, zero biases, then normalized.
    pub fn init(bands: usize, width: usize, seed: u64) -> Result<Self> {
        if bands == 0 || width == 0 {
            return Err(Error::Precondition("denoiser needs at least one channel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = channel_plan(bands, width);
        let mut layers = Vec::with_capacity(LAYERS);
        for w in plan.windows(2) {
            let (ci, co) = (w[0], w[1]);
            let bound = (6.0 / (ci * 9) as f64).sqrt();
            let weight = Tensor::from_fn(vec![co, ci, 3, 3], |_| rng.random_range(-bound..bound));
            layers.push(ConvLayer::new(weight, Tensor::zeros(vec![co]))?);
        }
        let mut params = Self { layers };
        params.spectral_normalize();
        Ok(params)
    }

    /// All-zero weights and biases.
    pub fn zeros(bands: usize, width: usize) -> Self {
        let plan = channel_plan(bands, width);
        let layers = plan
            .windows(2)
            .map(|w| ConvLayer {
                weight: Tensor::zeros(vec![w[1], w[0], 3, 3]),
                bias: Tensor::zeros(vec![w[1]]),
                u: unit(w[1]),
                v: unit(w[0] * 9),
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.len() != LAYERS {
            return Err(Error::Shape(format!("expected {LAYERS} layers, got {}", layers.len())));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(Error::Shape("layer channel counts do not chain".into()));
            }
        }
        if layers[0].in_channels() != layers[LAYERS - 1].out_channels() {
            return Err(Error::Shape("first and last layers disagree on bands".into()));
        }
        Ok(Self { layers })
    }

    pub fn bands(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn width(&self) -> usize {
        self.layers[0].out_channels()
    }

    /// Learnable scalars (weights and biases).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights and biases layer by layer, weight first.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten); `u`/`v` are left untouched.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.data_mut().copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// One power-iteration step per layer, then divides the weight by the
    /// estimate when it exceeds one.
    pub fn spectral_normalize(&mut self) {
        for l in &mut self.layers {
            let sigma = l.power_step();
            if sigma > 1.0 {
                l.weight = l.weight.scale(1.0 / sigma);
            }
        }
    }

    pub fn spectral_norms(&self) -> Vec<f64> {
        self.layers.iter().map(ConvLayer::estimated_norm).collect()
    }
}

fn unit(n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[0] = 1.0;
    v
}

fn channel_plan(bands: usize, width: usize) -> [usize; LAYERS + 1] {
    [bands, width, width, width, bands]
}

/// Side length of a block with `cols` pixels.
pub fn patch_side(cols: usize) -> Result<usize> {
    let n = (cols as f64).sqrt().round() as usize;
    if n * n != cols || n == 0 {
        return Err(Error::Shape(format!("{cols} columns do not form a square patch")));
    }
    Ok(n)
}

fn as_image(params: &DenoiserParams, block: &Tensor) -> Result<(Tensor, usize)> {
    let (d, cols) = block.expect_matrix("denoise")?;
    if d != params.bands() {
        return Err(Error::Shape(format!("block has {d} bands, denoiser {}", params.bands())));
    }
    let n = patch_side(cols)?;
    Ok((block.clone().reshape(vec![d, n, n])?, n))
}

/// Gradients with respect to every weight and bias, in
/// [`DenoiserParams::flatten`] order.
pub type FlatGrad = Vec<f64>;

/// Applies the network to a `d x n²` block.
pub fn denoise(params: &DenoiserParams, block: &Tensor) -> Result<Tensor> {
    let (d, cols) = (block.rows(), block.cols());
    let (mut x, _) = as_image(params, block)?;
    for (i, l) in params.layers.iter().enumerate() {
        x = conv2d(&x, &l.weight, &l.bias)?;
        if i + 1 < LAYERS {
            x = relu(&x);
        }
    }
    x.reshape(vec![d, cols])
}

/// A forward pass recorded on a tape, reusable for any number of VJPs.
pub struct DenoiserTape {
    tape: Tape,
    input: NodeId,
    leaves: Vec<NodeId>,
    output: NodeId,
    bands: usize,
    cols: usize,
    side: usize,
}

impl DenoiserTape {
    pub fn record(params: &DenoiserParams, block: &Tensor) -> Result<Self> {
        let (x, side) = as_image(params, block)?;
        let mut tape = Tape::new();
        let input = tape.leaf(x);
        let mut leaves = Vec::with_capacity(2 * LAYERS);
        let mut h = input;
        for (i, l) in params.layers.iter().enumerate() {
            let w = tape.leaf(l.weight.clone());
            let b = tape.leaf(l.bias.clone());
            leaves.push(w);
            leaves.push(b);
            h = tape.apply(Arc::new(Conv2d), &[h, w, b])?;
            if i + 1 < LAYERS {
                h = tape.apply(Arc::new(Relu), &[h])?;
            }
        }
        Ok(Self {
            tape,
            input,
            leaves,
            output: h,
            bands: block.rows(),
            cols: block.cols(),
            side,
        })
    }

    /// The network output as a `d x N` block.
    pub fn output(&self) -> Tensor {
        self.tape
            .value(self.output)
            .clone()
            .reshape(vec![self.bands, self.cols])
            .expect("same element count")
    }

    /// Input cotangent and, when `want_params`, the flattened parameter
    /// cotangent.
    pub fn vjp(&self, cot: &Tensor, want_params: bool) -> Result<(Tensor, Option<FlatGrad>)> {
        if cot.shape() != [self.bands, self.cols] {
            return Err(Error::dim("denoise_vjp", format!("cotangent {:?}", cot.shape())));
        }
        let mut wrt = vec![self.input];
        if want_params {
            wrt.extend_from_slice(&self.leaves);
        }
        let seed = cot.clone().reshape(vec![self.bands, self.side, self.side])?;
        let mut grads = self.tape.backward(self.output, seed, &wrt)?.into_iter();
        let cot_x = grads
            .next()
            .expect("input cotangent")
            .reshape(vec![self.bands, self.cols])?;
        let flat = want_params.then(|| grads.flat_map(Tensor::into_data).collect());
        Ok((cot_x, flat))
    }

    /// Bytes held by the recorded activations and parameters.
    pub fn bytes(&self) -> usize {
        self.tape.value_bytes()
    }
}

/// Reverse-mode derivative of [`denoise`]: returns the input cotangent and
/// the flattened parameter cotangent (`None` when `want_params` is false).
pub fn denoise_vjp(
    params: &DenoiserParams,
    block: &Tensor,
    cot: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Option<FlatGrad>)> {
    cot.expect_same_shape("denoise_vjp", block)?;
    DenoiserTape::record(params, block)?.vjp(cot, want_params)
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Fraction of the pairs held out to pick the best epoch.
    pub validation: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch: 16,
            adam: AdamConfig::with_lr(1e-3),
            validation: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub params: DenoiserParams,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Mean validation loss per epoch (empty when nothing is held out).
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// `‖N(Y) − X‖_F² / (d·N)`
pub fn block_loss(params: &DenoiserParams, noisy: &Tensor, clean: &Tensor) -> Result<f64> {
    let r = denoise(params, noisy)?.sub(clean)?;
    Ok(r.dot(&r)? / r.len() as f64)
}

fn loss_and_grad(params: &DenoiserParams, noisy: &Tensor, clean: &Tensor) -> Result<(f64, FlatGrad)> {
    let r = denoise(params, noisy)?.sub(clean)?;
    let scale = 1.0 / r.len() as f64;
    let loss = r.dot(&r)? * scale;
    let (_, g) = denoise_vjp(params, noisy, &r.scale(2.0 * scale), true)?;
    Ok((loss, g.expect("parameter gradient requested")))
}

/// Supervised pretraining on (noisy, clean) block pairs with Adam; spectral
/// normalization is re-applied after every step.
pub fn pretrain(
    pairs: &[(Tensor, Tensor)],
    init: DenoiserParams,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if pairs.is_empty() {
        return Err(Error::Precondition("pretraining needs at least one pair".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    shuffle(&mut order, &mut rng);
    let held = if pairs.len() > 1 {
        ((pairs.len() as f64 * cfg.validation).round() as usize).min(pairs.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(held);
    let mut train_idx = train_idx.to_vec();

    let mut params = init;
    let mut flat = params.flatten();
    let mut adam = Adam::new(cfg.adam.clone(), flat.len());
    let mut report = PretrainReport {
        params: params.clone(),
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
    };
    let mut best = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        shuffle(&mut train_idx, &mut rng);
        let mut total = 0.0;
        for batch in train_idx.chunks(cfg.batch) {
            let parts = batch
                .par_iter()
                .map(|&i| loss_and_grad(&params, &pairs[i].0, &pairs[i].1))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; flat.len()];
            for (loss, g) in &parts {
                total += loss;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b / batch.len() as f64);
            }
            adam.step(&mut flat, &grad);
            params.assign_flat(&flat)?;
            params.spectral_normalize();
            flat = params.flatten();
        }
        report.train_loss.push(total / train_idx.len() as f64);
        let score = if val_idx.is_empty() {
            *report.train_loss.last().expect("pushed above")
        } else {
            let v = val_idx
                .par_iter()
                .map(|&i| block_loss(&params, &pairs[i].0, &pairs[i].1))
                .collect::<Result<Vec<_>>>()?;
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            report.val_loss.push(mean);
            mean
        };
        log::info!("pretrain epoch {epoch}: loss {score:.6e}");
        if score < best {
            best = score;
            report.best_epoch = epoch;
            report.params = params.clone();
        }
    }
    if cfg.epochs == 0 {
        report.params = params;
    }
    Ok(report)
}

pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

/// Realized `b = softplus(raw_b)` and `μ = softplus(raw_mu)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarParams {
    pub raw_b: f64,
    pub raw_mu: f64,
}

impl ScalarParams {
    /// Picks the raw values that realize the given positive `b` and `μ`.
    pub fn from_realized(b: f64, mu: f64) -> Result<Self> {
        Ok(Self {
            raw_b: softplus_inv(b)?,
            raw_mu: softplus_inv(mu)?,
        })
    }

    pub fn b(&self) -> f64 {
        softplus(self.raw_b)
    }

    pub fn mu(&self) -> f64 {
        softplus(self.raw_mu)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_inv(y: f64) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!("softplus is positive, cannot invert {y}")));
    }
    Ok(if y > 30.0 { y + (-(-y).exp_m1()).ln() } else { y.exp_m1().ln() })
}
