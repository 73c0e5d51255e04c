//! The fixed overcomplete dictionary and the classic sparse coders used as
//! baselines: greedy OMP (single-vector and batched) and FISTA for the Lasso,
//! plus KSVD for learning the dictionary itself.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::autodiff::ops::soft;
use crate::autodiff::tensor::{dot, largest_eigenvalue, matvec, matvec_t};
use crate::autodiff::{matmul, matmul_tn, Tensor};
use crate::error::{Error, Result};

const UNIT_NORM_TOL: f64 = 1e-12;

/// A `d x M` matrix of unit-norm atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    atoms: Tensor,
}

impl Dictionary {
    /// Wraps an atom matrix whose columns already have unit norm.
    pub fn new(atoms: Tensor) -> Result<Self> {
        let (d, m) = atoms.expect_matrix("dictionary")?;
        for j in 0..m {
            let norm = atoms.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Precondition(format!("atom {j} has norm {norm}, expected 1")));
            }
        }
        if d > m {
            log::warn!("dictionary is undercomplete: d = {d} > M = {m}");
        }
        Ok(Self { atoms })
    }

    /// Normalizes every column to unit norm. Zero columns are rejected.
    pub fn from_unnormalized(mut atoms: Tensor) -> Result<Self> {
        let (_, m) = atoms.expect_matrix("dictionary")?;
        for j in 0..m {
            let mut col = atoms.column(j);
            let norm = dot(&col, &col).sqrt();
            if norm == 0.0 {
                return Err(Error::Precondition(format!("atom {j} is zero")));
            }
            col.iter_mut().for_each(|v| *v /= norm);
            atoms.set_column(j, &col);
        }
        Self::new(atoms)
    }

    /// Gaussian random atoms, normalized.
    pub fn random(d: usize, m: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let atoms = Tensor::from_fn(vec![d, m], |_| StandardNormal.sample(&mut rng));
        Self::from_unnormalized(atoms)
    }

    /// Signal dimension `d`.
    pub fn dim(&self) -> usize {
        self.atoms.rows()
    }

    /// Atom count `M`.
    pub fn atoms(&self) -> usize {
        self.atoms.cols()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.atoms
    }

    pub fn gram(&self) -> Tensor {
        matmul_tn(&self.atoms, &self.atoms).expect("square by construction")
    }

    /// The column-restricted matrix `D_S`.
    pub fn restrict(&self, support: &SupportSet) -> Tensor {
        self.atoms.select_columns(support.indices())
    }
}

/// Strictly increasing atom indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct SupportSet {
    indices: Vec<usize>,
}

impl SupportSet {
    pub fn new(indices: Vec<usize>, atoms: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Precondition(format!(
                "support indices must be strictly increasing: {indices:?}"
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= atoms) {
            return Err(Error::Precondition(format!("atom index {bad} out of range {atoms}")));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Representation coefficients: `M x N` for the full code, `|S| x N` when a
/// support is attached.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeMatrix {
    pub values: Tensor,
    pub support: Option<SupportSet>,
}

impl CodeMatrix {
    pub fn full(values: Tensor) -> Self {
        Self {
            values,
            support: None,
        }
    }

    pub fn restricted(values: Tensor, support: SupportSet) -> Result<Self> {
        if values.rows() != support.len() {
            return Err(Error::Shape(format!(
                "{} code rows for a support of size {}",
                values.rows(),
                support.len()
            )));
        }
        Ok(Self {
            values,
            support: Some(support),
        })
    }

    /// Expands a restricted code to the full `M x N` matrix.
    pub fn to_full(&self, atoms: usize) -> Tensor {
        match &self.support {
            None => self.values.clone(),
            Some(s) => {
                let n = self.values.cols();
                let mut out = Tensor::zeros(vec![atoms, n]);
                for (r, &i) in s.indices().iter().enumerate() {
                    out.row_mut(i).copy_from_slice(self.values.row(r));
                }
                out
            }
        }
    }
}

/// A sparse code of one signal: support plus matching coefficients.
pub type SparseCode = (SupportSet, Vec<f64>);

fn check_sparsity(s: usize, d: usize) -> Result<()> {
    if s == 0 || s > d {
        return Err(Error::Precondition(format!("sparsity must satisfy 1 <= s <= d = {d}, got {s}")));
    }
    Ok(())
}

/// Appends row `k` to a lower Cholesky factor of the selected Gram matrix.
/// `cross` holds the Gram entries between the new atom and the selected ones.
fn chol_append(lower: &mut Vec<Vec<f64>>, cross: &[f64], diag: f64, step: usize) -> Result<()> {
    let k = lower.len();
    let mut w = vec![0.0; k];
    for i in 0..k {
        let s: f64 = cross[i] - (0..i).map(|j| lower[i][j] * w[j]).sum::<f64>();
        w[i] = s / lower[i][i];
    }
    let rem = diag - dot(&w, &w);
    if !(rem > 1e-10 * diag.max(1.0)) {
        return Err(Error::Rank { step });
    }
    w.push(rem.sqrt());
    lower.push(w);
    Ok(())
}

/// Solves `L Lᵀ x = b` with `L` stored as ragged rows.
fn chol_solve_ragged(lower: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let k = lower.len();
    let mut z = vec![0.0; k];
    for i in 0..k {
        let s: f64 = b[i] - (0..i).map(|j| lower[i][j] * z[j]).sum::<f64>();
        z[i] = s / lower[i][i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let s: f64 = z[i] - (i + 1..k).map(|j| lower[j][i] * x[j]).sum::<f64>();
        x[i] = s / lower[i][i];
    }
    x
}

/// Index of the largest `|v|`, lowest index on ties.
/// Index of the largest `|v_i|` outside `taken`; ties go to the lowest index.
fn argmax_abs(v: &[f64], taken: &[usize]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best_val && !taken.contains(&i) {
            best = i;
            best_val = x.abs();
        }
    }
    best
}

fn sorted_code(mut order: Vec<(usize, f64)>, atoms: usize) -> Result<SparseCode> {
    order.sort_by_key(|&(i, _)| i);
    let (idx, coef): (Vec<usize>, Vec<f64>) = order.into_iter().unzip();
    Ok((SupportSet::new(idx, atoms)?, coef))
}

/// Orthogonal matching pursuit on one signal.
///
/// Greedily adds the atom most correlated with the residual (lowest index on
/// ties) and refits all coefficients by least squares, until `s` atoms are
/// selected or the residual norm drops to `eps`.
pub fn omp(y: &[f64], dict: &Dictionary, s: usize, eps: f64) -> Result<SparseCode> {
    let d = dict.dim();
    check_sparsity(s, d)?;
    if y.len() != d {
        return Err(Error::dim("omp", format!("signal length {} vs d = {d}", y.len())));
    }
    let atoms = dict.matrix();
    let mut residual = y.to_vec();
    let mut selected: Vec<usize> = Vec::with_capacity(s);
    let mut lower: Vec<Vec<f64>> = Vec::with_capacity(s);
    let mut coef = Vec::new();
    for step in 0..s {
        if dot(&residual, &residual).sqrt() <= eps {
            break;
        }
        let corr = matvec_t(atoms, &residual);
        let j = argmax_abs(&corr, &selected);
        let atom_j = atoms.column(j);
        let cross: Vec<f64> = selected
            .iter()
            .map(|&i| dot(&atoms.column(i), &atom_j))
            .collect();
        chol_append(&mut lower, &cross, dot(&atom_j, &atom_j), step)?;
        selected.push(j);
        let rhs: Vec<f64> = selected.iter().map(|&i| dot(&atoms.column(i), y)).collect();
        coef = chol_solve_ragged(&lower, &rhs);
        residual = y.to_vec();
        for (&i, &c) in selected.iter().zip(&coef) {
            for (r, a) in residual.iter_mut().zip(atoms.column(i)) {
                *r -= c * a;
            }
        }
    }
    sorted_code(selected.into_iter().zip(coef).collect(), dict.atoms())
}

/// Column-wise OMP using the precomputed Gram matrix `DᵀD` and correlations
/// `DᵀY`; no residual vector is ever formed.
pub fn batch_omp(y: &Tensor, dict: &Dictionary, s: usize, eps: f64) -> Result<Vec<SparseCode>> {
    let (d, n) = y.expect_matrix("batch_omp")?;
    check_sparsity(s, dict.dim())?;
    if d != dict.dim() {
        return Err(Error::dim("batch_omp", format!("signals have {d} rows, d = {}", dict.dim())));
    }
    let gram = dict.gram();
    let corr = matmul_tn(dict.matrix(), y)?.transpose(); // N x M
    let m = dict.atoms();
    (0..n)
        .into_par_iter()
        .map(|col| {
            let yc = y.column(col);
            let alpha0 = corr.row(col);
            let energy = dot(&yc, &yc);
            let mut alpha = alpha0.to_vec();
            let mut selected: Vec<usize> = Vec::with_capacity(s);
            let mut lower: Vec<Vec<f64>> = Vec::with_capacity(s);
            let mut gamma = Vec::new();
            let mut err2 = energy;
            for step in 0..s {
                if err2.max(0.0).sqrt() <= eps {
                    break;
                }
                let j = argmax_abs(&alpha, &selected);
                let cross: Vec<f64> = selected.iter().map(|&i| gram.at(i, j)).collect();
                chol_append(&mut lower, &cross, gram.at(j, j), step)?;
                selected.push(j);
                let rhs: Vec<f64> = selected.iter().map(|&i| alpha0[i]).collect();
                gamma = chol_solve_ragged(&lower, &rhs);
                // alpha = Dᵀ r = DᵀY - G_{:,I} γ
                for (k, a) in alpha.iter_mut().enumerate() {
                    let g_row = gram.row(k);
                    *a = alpha0[k]
                        - selected
                            .iter()
                            .zip(&gamma)
                            .map(|(&i, &c)| g_row[i] * c)
                            .sum::<f64>();
                }
                err2 = energy - dot(&gamma, &rhs);
            }
            sorted_code(selected.into_iter().zip(gamma).collect(), m)
        })
        .collect()
}

/// Outcome of [`fista_lasso`].
#[derive(Clone, Debug)]
pub struct LassoSolution {
    pub codes: CodeMatrix,
    pub objective: f64,
    pub iterations: usize,
}

/// `½‖Y − DG‖_F² + μ‖G‖₁,₁`
pub fn lasso_objective(y: &Tensor, atoms: &Tensor, g: &Tensor, mu: f64) -> Result<f64> {
    let r = y.sub(&matmul(atoms, g)?)?;
    Ok(0.5 * r.dot(&r)? + mu * g.data().iter().map(|v| v.abs()).sum::<f64>())
}

/// Minimizes the Lasso objective by FISTA with step `1/L`,
/// `L = λ_max(DᵀD)`, restarting momentum whenever the objective increases.
/// Stops when the relative objective change falls below `tol`.
pub fn fista_lasso(
    y: &Tensor,
    atoms: &Tensor,
    mu: f64,
    iters: usize,
    tol: f64,
) -> Result<LassoSolution> {
    if !(mu > 0.0) {
        return Err(Error::Precondition(format!("lasso weight must be positive, got {mu}")));
    }
    let (d, m) = atoms.expect_matrix("fista_lasso")?;
    let (d2, n) = y.expect_matrix("fista_lasso")?;
    if d != d2 {
        return Err(Error::dim("fista_lasso", format!("D is {d}x{m}, Y is {d2}x{n}")));
    }
    let gram = matmul_tn(atoms, atoms)?;
    let dty = matmul_tn(atoms, y)?;
    let lip = largest_eigenvalue(&gram, 10_000, 1e-15);
    if lip == 0.0 {
        return Ok(LassoSolution {
            codes: CodeMatrix::full(Tensor::zeros(vec![m, n])),
            objective: lasso_objective(y, atoms, &Tensor::zeros(vec![m, n]), mu)?,
            iterations: 0,
        });
    }
    let step = 1.0 / lip;
    let thresh = mu * step;
    let mut g = Tensor::zeros(vec![m, n]);
    let mut z = g.clone();
    let mut t = 1.0f64;
    let mut f_prev = lasso_objective(y, atoms, &g, mu)?;
    let mut iterations = 0;
    for k in 1..=iters {
        iterations = k;
        let grad = matmul(&gram, &z)?.sub(&dty)?;
        let mut g_new = z.clone();
        for (v, gr) in g_new.data_mut().iter_mut().zip(grad.data()) {
            *v = soft(*v - step * gr, thresh);
        }
        let f = lasso_objective(y, atoms, &g_new, mu)?;
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if f > f_prev {
            // adaptive restart: drop momentum
            t = 1.0;
            z = g_new.clone();
        } else {
            let beta = (t - 1.0) / t_new;
            z = g_new.clone();
            for ((zv, gn), go) in z.data_mut().iter_mut().zip(g_new.data()).zip(g.data()) {
                *zv = gn + beta * (gn - go);
            }
            t = t_new;
        }
        let change = (f_prev - f).abs();
        g = g_new;
        let done = change <= tol * f.abs().max(f64::MIN_POSITIVE);
        f_prev = f;
        if done {
            break;
        }
    }
    Ok(LassoSolution {
        codes: CodeMatrix::full(g),
        objective: f_prev,
        iterations,
    })
}

/// Outcome of [`ksvd`].
#[derive(Clone, Debug)]
pub struct KsvdOutcome {
    pub dictionary: Dictionary,
    /// Root-mean-square residual `(Σ‖x_i − D g_i‖² / P)^½` after each sweep.
    pub errors: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct KsvdConfig {
    pub atoms: usize,
    pub sparsity: usize,
    pub sweeps: usize,
    /// Alternating rank-1 refinement steps per atom update.
    pub rank1_steps: usize,
    pub seed: u64,
}

impl KsvdConfig {
    pub fn new(atoms: usize, sparsity: usize, sweeps: usize, seed: u64) -> Self {
        Self {
            atoms,
            sparsity,
            sweeps,
            rank1_steps: 8,
            seed,
        }
    }
}

fn residuals(train: &Tensor, atoms: &Tensor, codes: &[SparseCode]) -> Tensor {
    let mut r = train.clone();
    let p = train.cols();
    for (col, (support, coef)) in codes.iter().enumerate() {
        for (&i, &c) in support.indices().iter().zip(coef) {
            for b in 0..train.rows() {
                r.data_mut()[b * p + col] -= c * atoms.at(b, i);
            }
        }
    }
    r
}

fn column_norms(r: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; r.cols()];
    for b in 0..r.rows() {
        for (o, v) in out.iter_mut().zip(r.row(b)) {
            *o += v * v;
        }
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    out
}

/// K-SVD dictionary learning on the columns of `train` (`d x P`).
///
/// Each sweep recodes every sample with batch-OMP (keeping the previous code
/// whenever it was better, so the error never increases) and then refits each
/// atom jointly with its coefficients by a rank-1 approximation of the
/// restricted residual. Unused atoms are replaced by the worst-represented
/// sample.
pub fn ksvd(train: &Tensor, cfg: &KsvdConfig) -> Result<KsvdOutcome> {
    let (d, p) = train.expect_matrix("ksvd")?;
    let m = cfg.atoms;
    check_sparsity(cfg.sparsity, d)?;
    if p < m {
        return Err(Error::Precondition(format!(
            "KSVD needs at least M = {m} training vectors, got {p}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let norms = column_norms(train);
    let candidates: Vec<usize> = (0..p).filter(|&i| norms[i] > 0.0).collect();
    if candidates.len() < m {
        return Err(Error::Precondition("too few non-zero training vectors".into()));
    }
    let picks: Vec<usize> = sample(&mut rng, candidates.len(), m)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let mut atoms = train.select_columns(&picks);
    atoms = Dictionary::from_unnormalized(atoms)?.atoms;

    let mut errors = Vec::with_capacity(cfg.sweeps);
    let mut codes: Option<Vec<SparseCode>> = None;
    for _ in 0..cfg.sweeps {
        let dict = Dictionary { atoms: atoms.clone() };
        let mut fresh = batch_omp(train, &dict, cfg.sparsity, 0.0)?;
        let fresh_res = column_norms(&residuals(train, &atoms, &fresh));
        if let Some(old) = codes.take() {
            let old_res = column_norms(&residuals(train, &atoms, &old));
            for (i, code) in old.into_iter().enumerate() {
                if old_res[i] < fresh_res[i] {
                    fresh[i] = code;
                }
            }
        }
        let mut current = fresh;
        let mut resid = residuals(train, &atoms, &current);

        // users[k] = (sample, position of k in that sample's support)
        let mut users: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
        for (col, (support, _)) in current.iter().enumerate() {
            for (pos, &k) in support.indices().iter().enumerate() {
                users[k].push((col, pos));
            }
        }
        let mut replaced = vec![false; p];
        for k in 0..m {
            if users[k].is_empty() {
                let res_norms = column_norms(&resid);
                let worst = (0..p)
                    .filter(|&i| !replaced[i] && res_norms[i] > 0.0)
                    .max_by(|&a, &b| res_norms[a].total_cmp(&res_norms[b]).then(b.cmp(&a)));
                if let Some(w) = worst {
                    replaced[w] = true;
                    let col = resid.column(w);
                    let nrm = dot(&col, &col).sqrt();
                    atoms.set_column(k, &col.iter().map(|v| v / nrm).collect::<Vec<_>>());
                }
                continue;
            }
            let cols: Vec<usize> = users[k].iter().map(|&(c, _)| c).collect();
            let atom = atoms.column(k);
            // E = R_ω + d_k g_kᵀ
            let mut e = resid.select_columns(&cols);
            let q = cols.len();
            for (jj, &(c, pos)) in users[k].iter().enumerate() {
                let gk = current[c].1[pos];
                for b in 0..d {
                    e.data_mut()[b * q + jj] += atom[b] * gk;
                }
            }
            let mut dk = atom;
            let mut g = matvec_t(&e, &dk);
            for _ in 0..cfg.rank1_steps {
                let ed = matvec(&e, &g);
                let nrm = dot(&ed, &ed).sqrt();
                if nrm == 0.0 {
                    break;
                }
                dk = ed.into_iter().map(|v| v / nrm).collect();
                g = matvec_t(&e, &dk);
            }
            atoms.set_column(k, &dk);
            for (jj, &(c, pos)) in users[k].iter().enumerate() {
                current[c].1[pos] = g[jj];
                for b in 0..d {
                    resid.data_mut()[b * p + c] = e.at(b, jj) - dk[b] * g[jj];
                }
            }
        }
        errors.push((resid.dot(&resid)? / p as f64).sqrt());
        codes = Some(current);
    }
    Ok(KsvdOutcome {
        dictionary: Dictionary::from_unnormalized(atoms)?,
        errors,
    })
}
