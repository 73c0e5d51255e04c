//! Classical per-block sparse coding with a fixed dictionary, used as
//! reference denoisers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul, Tensor};
use crate::data::{reassemble, split_blocks, HyperCube};
use crate::dictionary::{batch_omp, fista_lasso, Dictionary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Batch OMP with at most `sparsity` atoms per spectrum, stopping once
    /// the residual norm reaches `eps`.
    BatchOmp { sparsity: usize, eps: f64 },
    /// FISTA on `½‖Y − DG‖² + μ‖G‖₁`.
    FistaLasso { mu: f64, iters: usize, tol: f64 },
}

impl Baseline {
    /// Batch OMP stopping at the expected noise norm `1.15·σ·√d`, and FISTA
    /// with the universal threshold `σ·√(2 ln M)`; `sigma` on the unit scale.
    pub fn standard(dict: &Dictionary, sigma: f64, sparsity: usize) -> Vec<Baseline> {
        let d = dict.dim() as f64;
        vec![
            Baseline::BatchOmp {
                sparsity: sparsity.min(dict.dim()),
                eps: 1.15 * sigma * d.sqrt(),
            },
            Baseline::FistaLasso {
                mu: sigma * (2.0 * (dict.atoms() as f64).ln()).sqrt(),
                iters: 500,
                tol: 1e-8,
            },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Baseline::BatchOmp { .. } => "batch-omp",
            Baseline::FistaLasso { .. } => "fista-lasso",
        }
    }
}

/// Codes one `d x N` block and returns `D·G`.
pub fn baseline_block(dict: &Dictionary, y: &Tensor, method: &Baseline) -> Result<Tensor> {
    match method {
        Baseline::BatchOmp { sparsity, eps } => {
            let codes = batch_omp(y, dict, *sparsity, *eps)?;
            let (d, n) = (dict.dim(), y.cols());
            let atoms = dict.matrix();
            let mut out = Tensor::zeros(vec![d, n]);
            for (col, (support, coef)) in codes.iter().enumerate() {
                for (&i, &c) in support.indices().iter().zip(coef) {
                    for b in 0..d {
                        out.data_mut()[b * n + col] += c * atoms.at(b, i);
                    }
                }
            }
            Ok(out)
        }
        Baseline::FistaLasso { mu, iters, tol } => {
            let sol = fista_lasso(y, dict.matrix(), *mu, *iters, *tol)?;
            matmul(dict.matrix(), &sol.codes.values)
        }
    }
}

/// Block split, per-block coding and reassembly; untiled pixels keep their
/// input values.
pub fn baseline_denoise_cube(
    dict: &Dictionary,
    cube: &HyperCube,
    n: usize,
    method: &Baseline,
) -> Result<HyperCube> {
    if cube.bands() != dict.dim() {
        return Err(Error::Config(format!(
            "cube has {} bands, dictionary d = {}",
            cube.bands(),
            dict.dim()
        )));
    }
    let set = split_blocks(cube, n)?;
    let out = set
        .blocks
        .par_iter()
        .map(|b| baseline_block(dict, &b.matrix, method))
        .collect::<Result<Vec<_>>>()?;
    reassemble(&set.with_matrices(out)?, Some(cube))
}
