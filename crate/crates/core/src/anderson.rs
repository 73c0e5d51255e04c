//! Anderson-accelerated fixed-point iteration.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Cholesky, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AndersonConfig {
    /// Memory depth; `m = 1` is plain (damped) iteration.
    pub m: usize,
    /// Damping in `(0, 1]`.
    pub beta: f64,
    pub max_iters: usize,
    /// Relative residual at which the solve stops.
    pub tol: f64,
    /// Tikhonov weight on the mixing least-squares problem, relative to the
    /// mean squared norm of the residual differences in memory.
    pub ridge: f64,
}

impl Default for AndersonConfig {
    fn default() -> Self {
        Self {
            m: 5,
            beta: 1.0,
            max_iters: 20,
            tol: 1e-4,
            ridge: 1e-10,
        }
    }
}

impl AndersonConfig {
    pub fn picard(max_iters: usize, tol: f64) -> Self {
        Self {
            m: 1,
            max_iters,
            tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("Anderson memory m must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("damping beta must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.ridge >= 0.0) || !(self.tol >= 0.0) {
            return Err(Error::Config("ridge and tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FixedPointReport {
    /// The last map evaluation `f(g_k)`.
    pub solution: Tensor,
    /// Map evaluations performed.
    pub iterations: usize,
    /// `‖f(g_k) − g_k‖ / ‖f(g_k)‖` per evaluation.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

/// Solves `g = f(g)` from `g0`. See [`anderson_solve_observed`].
pub fn anderson_solve<F>(f: F, g0: Tensor, cfg: &AndersonConfig) -> Result<FixedPointReport>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    anderson_solve_observed(f, g0, cfg, |_, _| {})
}

/// Anderson iteration that also hands every map evaluation `f(g_k)` to
/// `observe` together with its 1-based index.
///
/// The mixing weights minimize `‖Σ αᵢ rᵢ‖` subject to `Σ αᵢ = 1` over the
/// `m` most recent residuals `rᵢ = f(gᵢ) − gᵢ`. The constraint is removed
/// by working with residual differences: `γ` solves the ridge-regularized
/// least squares `min ‖r_k − ΔR γ‖`, and `α` follows from `γ`.
pub fn anderson_solve_observed<F, O>(
    mut f: F,
    g0: Tensor,
    cfg: &AndersonConfig,
    mut observe: O,
) -> Result<FixedPointReport>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
    O: FnMut(usize, &Tensor),
{
    cfg.validate()?;
    let shape = g0.shape().to_vec();
    let mut g = g0;
    let mut xs: Vec<Tensor> = Vec::with_capacity(cfg.m);
    let mut fs: Vec<Tensor> = Vec::with_capacity(cfg.m);
    let mut rs: Vec<Tensor> = Vec::with_capacity(cfg.m);
    let mut residuals = Vec::new();
    let mut solution = g.clone();
    for k in 0..cfg.max_iters {
        let fg = f(&g)?;
        if fg.shape() != shape.as_slice() {
            return Err(Error::dim("anderson", format!("map returned {:?}, expected {shape:?}", fg.shape())));
        }
        if !fg.is_finite() {
            return Err(Error::Divergence { iteration: k + 1 });
        }
        observe(k + 1, &fg);
        let r = fg.sub(&g)?;
        let rel = r.norm() / fg.norm().max(f64::MIN_POSITIVE);
        residuals.push(rel);
        if rel < cfg.tol {
            return Ok(FixedPointReport {
                solution: fg,
                iterations: k + 1,
                residuals,
                converged: true,
            });
        }
        if xs.len() == cfg.m {
            xs.remove(0);
            fs.remove(0);
            rs.remove(0);
        }
        xs.push(g);
        fs.push(fg.clone());
        rs.push(r);
        solution = fg;

        let alpha = mixing_weights(&rs, cfg.ridge);
        let mut next = Tensor::zeros(shape.clone());
        for ((a, x), fx) in alpha.iter().zip(&xs).zip(&fs) {
            if cfg.beta < 1.0 {
                next.axpy(a * (1.0 - cfg.beta), x)?;
            }
            next.axpy(a * cfg.beta, fx)?;
        }
        if !next.is_finite() {
            return Err(Error::Divergence { iteration: k + 1 });
        }
        g = next;
    }
    let converged = residuals.last().is_some_and(|&r| r < cfg.tol);
    Ok(FixedPointReport {
        solution,
        iterations: cfg.max_iters,
        residuals,
        converged,
    })
}

fn mixing_weights(rs: &[Tensor], ridge: f64) -> Vec<f64> {
    let k = rs.len();
    if k == 1 {
        return vec![1.0];
    }
    let last = &rs[k - 1];
    let diffs: Vec<Tensor> = (0..k - 1)
        .map(|i| rs[i + 1].sub(&rs[i]).expect("residuals share a shape"))
        .collect();
    let n = k - 1;
    let mut h = Tensor::zeros(vec![n, n]);
    let mut rhs = Tensor::zeros(vec![n, 1]);
    for i in 0..n {
        for j in 0..=i {
            let v = diffs[i].dot(&diffs[j]).expect("residuals share a shape");
            h.set(i, j, v);
            h.set(j, i, v);
        }
        rhs.set(i, 0, diffs[i].dot(last).expect("residuals share a shape"));
    }
    let scale = (0..n).map(|i| h.at(i, i)).sum::<f64>() / n as f64;
    let lambda = ridge * scale.max(f64::MIN_POSITIVE);
    for i in 0..n {
        let v = h.at(i, i);
        h.set(i, i, v + lambda);
    }
    match Cholesky::factor(&h).and_then(|c| c.solve(&rhs)) {
        Ok(gamma) if gamma.is_finite() => {
            let g = gamma.data();
            let mut alpha = vec![0.0; k];
            alpha[0] = g[0];
            for i in 1..n {
                alpha[i] = g[i] - g[i - 1];
            }
            alpha[k - 1] = 1.0 - g[n - 1];
            alpha
        }
        _ => last_only(k),
    }
}

fn last_only(k: usize) -> Vec<f64> {
    let mut a = vec![0.0; k];
    a[k - 1] = 1.0;
    a
}
