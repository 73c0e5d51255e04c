//! Deep-equilibrium engine: the estimate is the fixed point `g* = f(g*, Y)`
//! of the iteration map, and gradients come from the adjoint fixed point
//! `γ = (∂f/∂g)ᵀ γ + basisᵀ(basis·g* − x)` instead of backpropagating through
//! the forward iterations.

use serde::{Deserialize, Serialize};

use crate::anderson::{anderson_solve, anderson_solve_observed, AndersonConfig, FixedPointReport};
use crate::autodiff::{matmul_tn, Tensor};
use crate::error::{Error, Result};
use crate::hqs::{Block, MapParams, SolverContext};
use crate::model::{Engine, Model};
use crate::train::{fit, BlockGrad, FitConfig, FitOutcome, FitState, TrainSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeqConfig {
    pub forward: AndersonConfig,
    pub backward: AndersonConfig,
}

impl Default for DeqConfig {
    fn default() -> Self {
        Self {
            forward: AndersonConfig::default(),
            backward: AndersonConfig::default(),
        }
    }
}

/// Anderson solve of the map from `G⁰ = 0`.
pub fn deq_forward(
    ctx: &SolverContext,
    blk: &Block,
    p: &MapParams,
    cfg: &AndersonConfig,
) -> Result<FixedPointReport> {
    anderson_solve(|g| ctx.apply(blk, g, p), ctx.zero_code(blk.y.cols()), cfg)
}

/// Like [`deq_forward`], reporting the reconstruction after every map
/// evaluation.
pub fn deq_forward_observed(
    ctx: &SolverContext,
    blk: &Block,
    p: &MapParams,
    cfg: &AndersonConfig,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<FixedPointReport> {
    anderson_solve_observed(
        |g| ctx.apply(blk, g, p),
        ctx.zero_code(blk.y.cols()),
        cfg,
        |k, g| {
            if let Ok(x) = ctx.reconstruct(g) {
                observe(k, &x)
            }
        },
    )
}

/// Gradient of `½‖basis·g* − x‖²` with respect to the map parameters.
#[derive(Clone, Debug)]
pub struct DeqGradient {
    pub loss: f64,
    /// Denoiser weights and biases in flatten order.
    pub theta: Vec<f64>,
    pub raw_b: f64,
    pub raw_mu: f64,
    pub adjoint_iterations: usize,
    pub adjoint_converged: bool,
    /// The adjoint fixed point `γ*`.
    pub gamma: Tensor,
}

impl DeqGradient {
    /// `θ` followed by `raw_b`, `raw_mu`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.push(self.raw_b);
        v.push(self.raw_mu);
        v
    }
}

/// Implicit differentiation of `½‖basis·g* − x‖²` at `g_star`.
pub fn deq_backward(
    ctx: &SolverContext,
    blk: &Block,
    g_star: &Tensor,
    x: &Tensor,
    p: &MapParams,
    cfg: &AndersonConfig,
    theta_len: usize,
) -> Result<DeqGradient> {
    let resid = ctx.reconstruct(g_star)?.sub(x)?;
    let seed = matmul_tn(ctx.basis(), &resid)?;
    let mut g = implicit_gradient(ctx, blk, g_star, &seed, p, cfg, theta_len)?;
    g.loss = 0.5 * resid.dot(&resid)?;
    Ok(g)
}

/// Parameter gradient for an arbitrary loss whose gradient at `g*` is
/// `seed`. The map is recorded once at `g*`; each adjoint iteration replays
/// its VJP. The returned `loss` is zero.
pub fn implicit_gradient(
    ctx: &SolverContext,
    blk: &Block,
    g_star: &Tensor,
    seed: &Tensor,
    p: &MapParams,
    cfg: &AndersonConfig,
    theta_len: usize,
) -> Result<DeqGradient> {
    let trace = ctx.trace(blk, g_star, p)?;
    seed.expect_same_shape("implicit_gradient", g_star)?;
    let adj = anderson_solve(
        |gamma| {
            let mut next = trace.vjp(gamma, false)?.g;
            next.axpy(1.0, seed)?;
            Ok(next)
        },
        Tensor::zeros(seed.shape().to_vec()),
        cfg,
    )
    .map_err(|e| match e {
        Error::Divergence { iteration } => Error::AdjointDivergence { iteration },
        other => other,
    })?;
    if !adj.converged {
        log::debug!("adjoint solve stopped at residual {:?}", adj.residuals.last());
    }
    let pulled = trace.vjp(&adj.solution, true)?;
    Ok(DeqGradient {
        loss: 0.0,
        theta: pulled.theta.unwrap_or_else(|| vec![0.0; theta_len]),
        raw_b: pulled.raw_b,
        raw_mu: pulled.raw_mu,
        adjoint_iterations: adj.iterations,
        adjoint_converged: adj.converged,
        gamma: adj.solution,
    })
}

/// Forward and implicit backward for one training pair.
pub fn deq_block_grad(
    model: &Model,
    ctx: &SolverContext,
    sample: &TrainSample,
    cfg: &DeqConfig,
) -> Result<BlockGrad> {
    let blk = ctx.prepare(&sample.noisy)?;
    let p = model.map_params();
    let fwd = deq_forward(ctx, &blk, &p, &cfg.forward)?;
    let g = deq_backward(
        ctx,
        &blk,
        &fwd.solution,
        &sample.clean,
        &p,
        &cfg.backward,
        model.denoiser.param_count(),
    )?;
    Ok(BlockGrad {
        loss: g.loss,
        grad: g.flatten(),
        fwd_iters: fwd.iterations,
        bwd_iters: g.adjoint_iterations,
    })
}

/// End-to-end DEQ training; see [`fit`].
pub fn deq_train(
    start: impl Into<FitState>,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &DeqConfig,
    fit_cfg: &FitConfig,
    on_step: &mut dyn FnMut(&crate::train::StepRecord),
) -> Result<FitOutcome> {
    fit(
        start,
        train,
        val,
        fit_cfg,
        &Engine::Deq(cfg.forward.clone()),
        &|m, ctx, s| deq_block_grad(m, ctx, s, cfg),
        on_step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::chol_solve;
    use crate::denoiser::{DenoiserParams, ScalarParams};
    use crate::dictionary::Dictionary;
    use crate::hqs::Prior;

    #[test]
    fn dead_branches_reach_the_linear_solution() {
        let dict = Dictionary::random(4, 6, 3).unwrap();
        let den = DenoiserParams::zeros(4, 2);
        let sc = ScalarParams::from_realized(0.9, 1e6).unwrap();
        let ctx = SolverContext::full(&dict, sc).unwrap();
        let y = Tensor::from_fn(vec![4, 4], |i| (i as f64 * 0.41).cos());
        let blk = ctx.prepare(&y).unwrap();
        let p = MapParams::new(Prior::Network(&den), sc);
        let cfg = AndersonConfig {
            tol: 1e-12,
            ..AndersonConfig::default()
        };
        let rep = deq_forward(&ctx, &blk, &p, &cfg).unwrap();
        let mut a = dict.gram().scale(1.0 + sc.b());
        for i in 0..6 {
            let v = a.at(i, i);
            a.set(i, i, v + 1.0);
        }
        let expect = chol_solve(&a, &matmul_tn(dict.matrix(), &y).unwrap()).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 2);
        assert!(rep.solution.sub(&expect).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn exact_target_gives_zero_gradient() {
        let dict = Dictionary::random(4, 6, 5).unwrap();
        let den = DenoiserParams::init(4, 3, 6).unwrap();
        let sc = ScalarParams::from_realized(0.4, 0.05).unwrap();
        let ctx = SolverContext::full(&dict, sc).unwrap();
        let y = Tensor::from_fn(vec![4, 9], |i| 0.5 + 0.3 * (i as f64 * 0.7).sin());
        let blk = ctx.prepare(&y).unwrap();
        let p = MapParams::new(Prior::Network(&den), sc);
        let fwd = deq_forward(&ctx, &blk, &p, &AndersonConfig::default()).unwrap();
        let x = ctx.reconstruct(&fwd.solution).unwrap();
        let g = deq_backward(&ctx, &blk, &fwd.solution, &x, &p, &AndersonConfig::default(), 0).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.theta.iter().all(|&v| v == 0.0));
        assert_eq!((g.raw_b, g.raw_mu), (0.0, 0.0));
    }

    #[test]
    fn doubling_the_loss_doubles_the_gradient() {
        let dict = Dictionary::random(4, 6, 7).unwrap();
        let den = DenoiserParams::init(4, 3, 8).unwrap();
        let sc = ScalarParams::from_realized(0.4, 0.05).unwrap();
        let ctx = SolverContext::full(&dict, sc).unwrap();
        let y = Tensor::from_fn(vec![4, 9], |i| 0.5 + 0.3 * (i as f64 * 0.3).cos());
        let blk = ctx.prepare(&y).unwrap();
        let p = MapParams::new(Prior::Network(&den), sc);
        let cfg = AndersonConfig {
            max_iters: 200,
            tol: 1e-14,
            ..AndersonConfig::default()
        };
        let fwd = deq_forward(&ctx, &blk, &p, &cfg).unwrap();
        let x = y.map(|v| v * 0.9);
        let resid = ctx.reconstruct(&fwd.solution).unwrap().sub(&x).unwrap();
        let seed = matmul_tn(ctx.basis(), &resid).unwrap();
        let one = implicit_gradient(&ctx, &blk, &fwd.solution, &seed, &p, &cfg, 0).unwrap();
        let two = implicit_gradient(&ctx, &blk, &fwd.solution, &seed.scale(2.0), &p, &cfg, 0).unwrap();
        let (a, b) = (one.flatten(), two.flatten());
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (u, v) in a.iter().zip(&b) {
            assert!((v - 2.0 * u).abs() <= 1e-10 * scale.max(1.0));
        }
    }
}
