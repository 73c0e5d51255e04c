//! Deep-unrolling engine: `K` weight-tied applications of the iteration map
//! from `G⁰ = 0`, differentiated by backpropagating through every layer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_tn, Tensor};
use crate::denoiser::{DenoiserParams, DenoiserTape};
use crate::error::{Error, Result};
use crate::hqs::{Block, MapParams, MapTrace, Prior, SolverContext, Variant};
use crate::model::{Engine, Model};
use crate::train::{fit, BlockGrad, FitConfig, FitOutcome, FitState, StepRecord, TrainSample};

/// What the unrolled loss compares against the clean block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTarget {
    /// `basis · G^{(K)}`
    Reconstruction,
    /// `N(D_S G_S^{(K)})`, fast variant only.
    ZOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnrollConfig {
    pub k: usize,
    pub variant: Variant,
    pub loss_target: LossTarget,
}

impl UnrollConfig {
    pub fn new(k: usize, variant: Variant) -> Self {
        Self {
            k,
            variant,
            loss_target: LossTarget::Reconstruction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("unrolled depth K must be >= 1".into()));
        }
        if self.loss_target == LossTarget::ZOutput && self.variant != Variant::Fast {
            return Err(Error::Config("the Z-output loss is only defined for the fast variant".into()));
        }
        Ok(())
    }
}

/// Every layer's recorded map application plus the iterates
/// `G^{(1)} … G^{(K)}`.
pub struct UnrollTrace<'a> {
    ctx: &'a SolverContext,
    layers: Vec<MapTrace<'a>>,
    /// Extra denoiser pass for the Z-output target.
    z_tape: Option<DenoiserTape>,
    pub iterates: Vec<Tensor>,
}

impl UnrollTrace<'_> {
    pub fn output(&self) -> &Tensor {
        self.iterates.last().expect("K >= 1")
    }

    /// The block estimate the loss compares with the clean signal.
    pub fn estimate(&self) -> Result<Tensor> {
        match &self.z_tape {
            Some(t) => Ok(t.output()),
            None => self.ctx.reconstruct(self.output()),
        }
    }

    /// Bytes retained for the backward pass.
    pub fn bytes(&self) -> usize {
        self.layers.iter().map(MapTrace::bytes).sum::<usize>()
            + self.z_tape.as_ref().map_or(0, DenoiserTape::bytes)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

pub fn du_forward<'a>(
    ctx: &'a SolverContext,
    blk: &Block,
    p: &MapParams<'a>,
    cfg: &UnrollConfig,
) -> Result<UnrollTrace<'a>> {
    cfg.validate()?;
    if ctx.variant() != cfg.variant {
        return Err(Error::Config("context variant differs from the unroll config".into()));
    }
    let mut g = ctx.zero_code(blk.y.cols());
    let mut layers = Vec::with_capacity(cfg.k);
    let mut iterates = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let t = ctx.trace(blk, &g, p)?;
        g = t.output().clone();
        layers.push(t);
        iterates.push(g.clone());
    }
    let z_tape = match cfg.loss_target {
        LossTarget::Reconstruction => None,
        LossTarget::ZOutput => match p.prior {
            Prior::Network(params) => Some(DenoiserTape::record(params, &ctx.reconstruct(&g)?)?),
            Prior::Identity => None,
        },
    };
    Ok(UnrollTrace {
        ctx,
        layers,
        z_tape,
        iterates,
    })
}

/// Gradient of the unrolled loss `½‖estimate − x‖²`.
#[derive(Clone, Debug)]
pub struct DuGradient {
    pub loss: f64,
    pub theta: Vec<f64>,
    pub raw_b: f64,
    pub raw_mu: f64,
}

impl DuGradient {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.push(self.raw_b);
        v.push(self.raw_mu);
        v
    }
}

/// Reverse pass through all layers of `trace`.
pub fn du_backward(trace: &UnrollTrace, x: &Tensor, params: &DenoiserParams) -> Result<DuGradient> {
    let ctx = trace.ctx;
    let estimate = trace.estimate()?;
    let resid = estimate.sub(x)?;
    let loss = 0.5 * resid.dot(&resid)?;
    let mut theta = vec![0.0; params.param_count()];
    let recon_cot = match &trace.z_tape {
        Some(tape) => {
            let (cx, ct) = tape.vjp(&resid, true)?;
            add_into(&mut theta, ct.as_deref());
            cx
        }
        None => resid,
    };
    let mut cot = matmul_tn(ctx.basis(), &recon_cot)?;
    let (mut raw_b, mut raw_mu) = (0.0, 0.0);
    for layer in trace.layers.iter().rev() {
        let g = layer.vjp(&cot, true)?;
        add_into(&mut theta, g.theta.as_deref());
        raw_b += g.raw_b;
        raw_mu += g.raw_mu;
        cot = g.g;
    }
    Ok(DuGradient {
        loss,
        theta,
        raw_b,
        raw_mu,
    })
}

fn add_into(acc: &mut [f64], g: Option<&[f64]>) {
    if let Some(g) = g {
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

pub fn du_block_grad(
    model: &Model,
    ctx: &SolverContext,
    sample: &TrainSample,
    cfg: &UnrollConfig,
) -> Result<BlockGrad> {
    let blk = ctx.prepare(&sample.noisy)?;
    let p = model.map_params();
    let trace = du_forward(ctx, &blk, &p, cfg)?;
    let g = du_backward(&trace, &sample.clean, &model.denoiser)?;
    Ok(BlockGrad {
        loss: g.loss,
        grad: g.flatten(),
        fwd_iters: cfg.k,
        bwd_iters: cfg.k,
    })
}

/// End-to-end unrolled training; see [`fit`].
pub fn du_train(
    start: impl Into<FitState>,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &UnrollConfig,
    fit_cfg: &FitConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    fit(
        start,
        train,
        val,
        fit_cfg,
        &Engine::Du { k: cfg.k },
        &|m, ctx, s| du_block_grad(m, ctx, s, cfg),
        on_step,
    )
}
