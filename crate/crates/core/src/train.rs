//! Optimizer, step logging and seed bookkeeping shared by the training loops.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::denoiser::shuffle;
use crate::dictionary::SupportSet;
use crate::error::{Error, Result};
use crate::hqs::SolverContext;
use crate::metrics::block_psnr;
use crate::model::{Engine, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, len: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub fwd_iters: f64,
    pub bwd_iters: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub engine: String,
    pub variant: String,
}

/// Appends [`StepRecord`]s as JSON lines.
pub struct JsonlLog {
    out: BufWriter<File>,
}

impl JsonlLog {
    pub fn create(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("<training log>", e))
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// What a derived seed is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedPurpose {
    Data = 1,
    Init = 2,
    Noise = 3,
    Shuffle = 4,
    Dictionary = 5,
}

/// Derives an independent seed per purpose from the master seed (SplitMix64
/// finalizer over `master` and the purpose tag).
pub fn derive_seed(master: u64, purpose: SeedPurpose) -> u64 {
    let mut z = master ^ (purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One (noisy, clean) block pair.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub noisy: Tensor,
    pub clean: Tensor,
    /// Cached support for the fast variant; it depends only on the noisy
    /// block and the fixed dictionary.
    pub support: Option<SupportSet>,
}

impl TrainSample {
    pub fn new(noisy: Tensor, clean: Tensor) -> Result<Self> {
        noisy.expect_same_shape("training pair", &clean)?;
        Ok(Self {
            noisy,
            clean,
            support: None,
        })
    }

    /// Pairs with supports precomputed when the model needs them.
    pub fn prepare_all(pairs: Vec<(Tensor, Tensor)>, model: &Model) -> Result<Vec<Self>> {
        pairs
            .into_par_iter()
            .map(|(noisy, clean)| {
                let mut s = Self::new(noisy, clean)?;
                if model.variant == crate::hqs::Variant::Fast {
                    s.support = Some(model.support_for(&s.noisy)?);
                }
                Ok(s)
            })
            .collect()
    }
}

/// Loss and flattened gradient (`θ`, `raw_b`, `raw_mu`) of one block.
#[derive(Clone, Debug)]
pub struct BlockGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub fwd_iters: usize,
    pub bwd_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Total epoch count; a resumed run continues up to this number.
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Also learn `b` and `μ`.
    pub train_scalars: bool,
}

impl FitConfig {
    pub fn new(epochs: usize, batch: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch,
            adam: AdamConfig::with_lr(lr),
            seed,
            train_scalars: true,
        }
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    pub model: Model,
    pub adam: Option<Adam>,
    pub best: Option<(Model, f64)>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl From<Model> for FitState {
    fn from(model: Model) -> Self {
        Self {
            model,
            adam: None,
            best: None,
            epoch: 0,
            step: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
    /// Mean block loss per epoch run.
    pub epoch_loss: Vec<f64>,
    /// Mean validation block PSNR per epoch run (empty without validation).
    pub val_psnr: Vec<f64>,
    /// Blocks dropped because a solve diverged.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub state: FitState,
    pub history: TrainHistory,
}

impl FitOutcome {
    /// Best model by validation PSNR (or training loss without validation).
    pub fn best(&self) -> &Model {
        self.state.best.as_ref().map_or(&self.state.model, |(m, _)| m)
    }
}

pub type GradFn<'a> = dyn Fn(&Model, &SolverContext, &TrainSample) -> Result<BlockGrad> + Sync + 'a;

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::Divergence { .. } | Error::AdjointDivergence { .. } | Error::Conditioning { .. }
    )
}

/// Mean validation PSNR of `model` run with `engine`.
pub fn validation_psnr(model: &Model, val: &[TrainSample], engine: &Engine) -> Result<f64> {
    let shared = model.shared_context()?;
    let scores = val
        .par_iter()
        .map(|s| {
            let ctx = model.block_context(shared.as_ref(), &s.noisy, s.support.as_ref())?;
            block_psnr(&model.solve(&ctx, &s.noisy, engine)?.reconstruction, &s.clean)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

/// Minibatch Adam over blocks, re-normalizing the denoiser after every
/// step and keeping the best model seen at epoch ends.
///
/// Per-block gradients are computed in parallel and summed in batch order,
/// so results do not depend on the thread count. Blocks whose forward or
/// adjoint solve diverges are skipped and counted.
pub fn fit(
    start: impl Into<FitState>,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &FitConfig,
    engine: &Engine,
    grad_fn: &GradFn,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<FitOutcome> {
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if train.is_empty() {
        return Err(Error::Precondition("training needs at least one block".into()));
    }
    let mut state: FitState = start.into();
    let mut flat = state.model.flatten();
    let mut adam = state
        .adam
        .take()
        .unwrap_or_else(|| Adam::new(cfg.adam.clone(), flat.len()));
    adam.cfg = cfg.adam.clone();
    let mut history = TrainHistory::default();
    let (engine_name, variant) = (engine.name().to_string(), state.model.variant.as_str().to_string());
    for epoch in state.epoch..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed.wrapping_add(epoch as u64),
            SeedPurpose::Shuffle,
        ));
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut rng);
        let (mut epoch_loss, mut epoch_blocks) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch) {
            let started = Instant::now();
            let model = &state.model;
            let shared = model.shared_context()?;
            let results: Vec<Result<BlockGrad>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    let ctx = model.block_context(shared.as_ref(), &s.noisy, s.support.as_ref())?;
                    grad_fn(model, &ctx, s)
                })
                .collect();
            let mut grad = vec![0.0; flat.len()];
            let (mut loss, mut used, mut fwd, mut bwd) = (0.0, 0usize, 0usize, 0usize);
            for r in results {
                match r {
                    Ok(g) => {
                        loss += g.loss;
                        fwd += g.fwd_iters;
                        bwd += g.bwd_iters;
                        used += 1;
                        grad.iter_mut().zip(&g.grad).for_each(|(a, b)| *a += b);
                    }
                    Err(e) if is_divergence(&e) => {
                        log::warn!("skipping block: {e}");
                        history.skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            if used == 0 {
                continue;
            }
            let inv = 1.0 / used as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if !cfg.train_scalars {
                let n = grad.len();
                grad[n - 2] = 0.0;
                grad[n - 1] = 0.0;
            }
            let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            adam.step(&mut flat, &grad);
            state.model.assign_flat(&flat)?;
            state.model.denoiser.spectral_normalize();
            flat = state.model.flatten();
            epoch_loss += loss;
            epoch_blocks += used;
            let rec = StepRecord {
                epoch,
                step: state.step,
                loss: loss * inv,
                fwd_iters: fwd as f64 * inv,
                bwd_iters: bwd as f64 * inv,
                grad_norm,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                engine: engine_name.clone(),
                variant: variant.clone(),
            };
            state.step += 1;
            on_step(&rec);
            history.records.push(rec);
        }
        let mean_loss = epoch_loss / epoch_blocks.max(1) as f64;
        history.epoch_loss.push(mean_loss);
        let score = if val.is_empty() {
            -mean_loss
        } else {
            let p = validation_psnr(&state.model, val, engine)?;
            history.val_psnr.push(p);
            p
        };
        log::info!("{engine_name}-{variant} epoch {epoch}: loss {mean_loss:.6e}, score {score:.4}");
        if state.best.as_ref().is_none_or(|(_, b)| score > *b) {
            state.best = Some((state.model.clone(), score));
        }
        state.epoch = epoch + 1;
    }
    state.adam = Some(adam);
    Ok(FitOutcome { state, history })
}
