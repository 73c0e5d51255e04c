//! A complete sparse-coding denoiser and the block pipeline around it.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anderson::{anderson_solve_observed, AndersonConfig};
use crate::autodiff::Tensor;
use crate::data::{reassemble, split_blocks, HyperCube};
use crate::denoiser::{DenoiserParams, ScalarParams};
use crate::dictionary::{Dictionary, SupportSet};
use crate::error::{Error, Result};
use crate::hqs::{select_support, MapParams, Prior, SolverContext, Variant};

/// Default support size of the fast variant.
pub const DEFAULT_SPARSITY: usize = 10;

/// How the iteration map is turned into an estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    /// Fixed point found by Anderson acceleration.
    Deq(AndersonConfig),
    /// Exactly `K` applications from zero.
    Du { k: usize },
}

impl Engine {
    pub fn name(&self) -> &'static str {
        match self {
            Engine::Deq(_) => "deq",
            Engine::Du { .. } => "du",
        }
    }

    /// Same engine with a different iteration budget.
    pub fn with_iterations(&self, iters: usize) -> Engine {
        match self {
            Engine::Deq(cfg) => Engine::Deq(AndersonConfig {
                max_iters: iters,
                ..cfg.clone()
            }),
            Engine::Du { .. } => Engine::Du { k: iters },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dictionary: Dictionary,
    pub denoiser: DenoiserParams,
    pub scalars: ScalarParams,
    pub variant: Variant,
    /// Support size `s` of the fast variant.
    pub sparsity: usize,
}

/// The estimate for one block.
#[derive(Clone, Debug)]
pub struct Solved {
    pub code: Tensor,
    pub reconstruction: Tensor,
    pub iterations: usize,
    pub converged: bool,
}

impl Model {
    pub fn new(
        dictionary: Dictionary,
        denoiser: DenoiserParams,
        scalars: ScalarParams,
        variant: Variant,
        sparsity: usize,
    ) -> Result<Self> {
        if denoiser.bands() != dictionary.dim() {
            return Err(Error::Config(format!(
                "denoiser has {} bands, dictionary d = {}",
                denoiser.bands(),
                dictionary.dim()
            )));
        }
        if variant == Variant::Fast && (sparsity == 0 || sparsity > dictionary.dim()) {
            return Err(Error::Config(format!(
                "support size must satisfy 1 <= s <= d = {}, got {sparsity}",
                dictionary.dim()
            )));
        }
        Ok(Self {
            dictionary,
            denoiser,
            scalars,
            variant,
            sparsity,
        })
    }

    pub fn bands(&self) -> usize {
        self.dictionary.dim()
    }

    pub fn map_params(&self) -> MapParams<'_> {
        MapParams::new(Prior::Network(&self.denoiser), self.scalars)
    }

    /// The context shared by all blocks (full variant only).
    pub fn shared_context(&self) -> Result<Option<SolverContext>> {
        match self.variant {
            Variant::Full => Ok(Some(SolverContext::full(&self.dictionary, self.scalars)?)),
            Variant::Fast => Ok(None),
        }
    }

    pub fn support_for(&self, y: &Tensor) -> Result<SupportSet> {
        select_support(y, &self.dictionary, self.sparsity, 0.0)
    }

    /// The context for one block; `support` is reused when given.
    pub fn block_context<'a>(
        &self,
        shared: Option<&'a SolverContext>,
        y: &Tensor,
        support: Option<&SupportSet>,
    ) -> Result<Cow<'a, SolverContext>> {
        match (self.variant, shared) {
            (Variant::Full, Some(ctx)) => Ok(Cow::Borrowed(ctx)),
            (Variant::Full, None) => Ok(Cow::Owned(SolverContext::full(&self.dictionary, self.scalars)?)),
            (Variant::Fast, _) => {
                let s = match support {
                    Some(s) => s.clone(),
                    None => self.support_for(y)?,
                };
                Ok(Cow::Owned(SolverContext::fast(&self.dictionary, s, self.scalars)?))
            }
        }
    }

    /// Solves one block, calling `observe(k, reconstruction_k)` after every
    /// map application.
    pub fn solve_observed(
        &self,
        ctx: &SolverContext,
        y: &Tensor,
        engine: &Engine,
        mut observe: impl FnMut(usize, &Tensor),
    ) -> Result<Solved> {
        let blk = ctx.prepare(y)?;
        let p = self.map_params();
        let g0 = ctx.zero_code(y.cols());
        let (code, iterations, converged) = match engine {
            Engine::Deq(cfg) => {
                let rep = anderson_solve_observed(
                    |g| ctx.apply(&blk, g, &p),
                    g0,
                    cfg,
                    |k, g| {
                        if let Ok(x) = ctx.reconstruct(g) {
                            observe(k, &x)
                        }
                    },
                )?;
                (rep.solution, rep.iterations, rep.converged)
            }
            Engine::Du { k } => {
                if *k == 0 {
                    return Err(Error::Config("unrolled depth K must be >= 1".into()));
                }
                let mut g = g0;
                for layer in 1..=*k {
                    g = ctx.apply(&blk, &g, &p)?;
                    observe(layer, &ctx.reconstruct(&g)?);
                }
                (g, *k, true)
            }
        };
        let reconstruction = ctx.reconstruct(&code)?;
        Ok(Solved {
            code,
            reconstruction,
            iterations,
            converged,
        })
    }

    pub fn solve(&self, ctx: &SolverContext, y: &Tensor, engine: &Engine) -> Result<Solved> {
        self.solve_observed(ctx, y, engine, |_, _| {})
    }

    /// Solves every block independently (in parallel; results do not depend
    /// on the thread count).
    pub fn solve_blocks(&self, blocks: &[Tensor], engine: &Engine) -> Result<Vec<Solved>> {
        let shared = self.shared_context()?;
        blocks
            .par_iter()
            .map(|y| {
                let ctx = self.block_context(shared.as_ref(), y, None)?;
                self.solve(&ctx, y, engine)
            })
            .collect()
    }

    /// Splits the cube into `n x n` blocks, solves each and reassembles.
    /// Pixels outside the tiled area keep their input values.
    pub fn denoise_cube(&self, cube: &HyperCube, n: usize, engine: &Engine) -> Result<HyperCube> {
        if cube.bands() != self.bands() {
            return Err(Error::Config(format!(
                "cube has {} bands, model expects {}",
                cube.bands(),
                self.bands()
            )));
        }
        let set = split_blocks(cube, n)?;
        let inputs: Vec<Tensor> = set.blocks.iter().map(|b| b.matrix.clone()).collect();
        let solved = self.solve_blocks(&inputs, engine)?;
        let out = set.with_matrices(solved.into_iter().map(|s| s.reconstruction).collect())?;
        reassemble(&out, Some(cube))
    }

    /// Denoiser weights and biases followed by `raw_b`, `raw_mu`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.denoiser.flatten();
        v.push(self.scalars.raw_b);
        v.push(self.scalars.raw_mu);
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.denoiser.param_count();
        if flat.len() != n + 2 {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), n + 2)));
        }
        self.denoiser.assign_flat(&flat[..n])?;
        self.scalars = ScalarParams {
            raw_b: flat[n],
            raw_mu: flat[n + 1],
        };
        Ok(())
    }
}
