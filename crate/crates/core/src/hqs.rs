//! Half-quadratic-splitting iteration maps.
//!
//! The full map acts on the complete `M x N` code:
//!
//! ```text
//! G⁺ = ((1+b)DᵀD + I)⁻¹ (DᵀY + b·soft(G, μ/b) + b·Dᵀ N(DG))
//! ```
//!
//! The fast map acts on the rows of a block-shared support `S`:
//!
//! ```text
//! G_S⁺ = ((1+b)D_SᵀD_S + εI)⁻¹ (D_SᵀY + b·D_Sᵀ N(D_S G_S))
//! ```
//!
//! A [`SolverContext`] holds the basis and the Cholesky factor of the system
//! matrix for one realized `b`; every map call checks that `b` still matches.

use crate::autodiff::ops::soft;
use crate::autodiff::{matmul, matmul_tn, Cholesky, Tensor};
use crate::denoiser::{denoise, sigmoid, DenoiserParams, DenoiserTape, FlatGrad, ScalarParams};
use crate::dictionary::{omp, CodeMatrix, Dictionary, SupportSet};
use crate::error::{Error, Result};

/// Ridge added to the restricted Gram matrix of the fast map.
pub const FAST_RIDGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Fast,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Fast => "fast",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "fast" => Ok(Variant::Fast),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// The proximal step plugged into the `Z` branch.
#[derive(Clone, Copy, Debug)]
pub enum Prior<'a> {
    Network(&'a DenoiserParams),
    /// `N(x) = x`.
    Identity,
}

impl Prior<'_> {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Prior::Network(p) => denoise(p, x),
            Prior::Identity => Ok(x.clone()),
        }
    }
}

/// Learnable quantities seen by the map.
#[derive(Clone, Copy, Debug)]
pub struct MapParams<'a> {
    pub prior: Prior<'a>,
    pub scalars: ScalarParams,
}

impl<'a> MapParams<'a> {
    pub fn new(prior: Prior<'a>, scalars: ScalarParams) -> Self {
        Self { prior, scalars }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Form {
    /// Soft-threshold and denoiser branches, system `(1+b)DᵀD + I`.
    Full,
    /// Soft-threshold branch only, system `DᵀD + bI`.
    SparseOnly,
    /// Denoiser branch on the support rows, system `(1+b)D_SᵀD_S + εI`.
    Fast,
}

/// Basis and factorized system matrix for one realized `b`.
#[derive(Clone, Debug)]
pub struct SolverContext {
    form: Form,
    support: Option<SupportSet>,
    atoms: usize,
    basis: Tensor,
    gram: Tensor,
    chol: Cholesky,
    b: f64,
}

/// A block of signals together with the cached correlations `basisᵀY`.
#[derive(Clone, Debug)]
pub struct Block {
    pub y: Tensor,
    pub dty: Tensor,
}

/// The three HQS variables.
#[derive(Clone, Debug, PartialEq)]
pub struct HqsState {
    pub g: Tensor,
    pub v: Tensor,
    pub z: Tensor,
}

impl HqsState {
    /// `G = 0`, `V = 0`, `Z = Y`.
    pub fn initial(atoms: usize, y: &Tensor) -> Self {
        let n = y.cols();
        Self {
            g: Tensor::zeros(vec![atoms, n]),
            v: Tensor::zeros(vec![atoms, n]),
            z: y.clone(),
        }
    }
}

impl SolverContext {
    /// Context for the full map with both branches.
    pub fn full(dict: &Dictionary, scalars: ScalarParams) -> Result<Self> {
        let b = scalars.b();
        let gram = dict.gram();
        let mut a = gram.scale(1.0 + b);
        add_diag(&mut a, 1.0);
        Ok(Self {
            form: Form::Full,
            support: None,
            atoms: dict.atoms(),
            basis: dict.matrix().clone(),
            chol: Cholesky::factor(&a)?,
            gram,
            b,
        })
    }

    /// Context for the full map with the denoiser branch removed; its fixed
    /// points solve a weighted Lasso.
    pub fn sparse_only(dict: &Dictionary, scalars: ScalarParams) -> Result<Self> {
        let b = scalars.b();
        let gram = dict.gram();
        let mut a = gram.clone();
        add_diag(&mut a, b);
        Ok(Self {
            form: Form::SparseOnly,
            support: None,
            atoms: dict.atoms(),
            basis: dict.matrix().clone(),
            chol: Cholesky::factor(&a)?,
            gram,
            b,
        })
    }

    /// Context for the fast map on the atoms in `support`.
    pub fn fast(dict: &Dictionary, support: SupportSet, scalars: ScalarParams) -> Result<Self> {
        if support.len() > dict.dim() {
            return Err(Error::Precondition(format!(
                "support of {} atoms exceeds d = {}",
                support.len(),
                dict.dim()
            )));
        }
        if let Some(&bad) = support.indices().iter().find(|&&i| i >= dict.atoms()) {
            return Err(Error::Precondition(format!("atom {bad} not in dictionary")));
        }
        let b = scalars.b();
        let basis = dict.restrict(&support);
        let gram = matmul_tn(&basis, &basis)?;
        let mut a = gram.scale(1.0 + b);
        add_diag(&mut a, FAST_RIDGE);
        let chol = Cholesky::factor(&a).map_err(|e| match e {
            Error::NotPositiveDefinite { pivot, .. } => Error::Conditioning { pivot },
            other => other,
        })?;
        Ok(Self {
            form: Form::Fast,
            support: Some(support),
            atoms: dict.atoms(),
            basis,
            gram,
            chol,
            b,
        })
    }

    pub fn variant(&self) -> Variant {
        match self.form {
            Form::Fast => Variant::Fast,
            _ => Variant::Full,
        }
    }

    pub fn support(&self) -> Option<&SupportSet> {
        self.support.as_ref()
    }

    /// `D` or `D_S`.
    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    /// Rows of the code the map acts on.
    pub fn code_rows(&self) -> usize {
        self.basis.cols()
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    fn has_soft(&self) -> bool {
        self.form != Form::Fast
    }

    fn has_denoiser(&self) -> bool {
        self.form != Form::SparseOnly
    }

    /// Fails when the scalars no longer realize the factored `b`.
    pub fn check(&self, scalars: &ScalarParams) -> Result<()> {
        let current = scalars.b();
        if current != self.b {
            return Err(Error::StaleContext {
                factored: self.b,
                current,
            });
        }
        Ok(())
    }

    pub fn prepare(&self, y: &Tensor) -> Result<Block> {
        let (d, _) = y.expect_matrix("prepare block")?;
        if d != self.basis.rows() {
            return Err(Error::dim("prepare block", format!("{d} bands vs d = {}", self.basis.rows())));
        }
        Ok(Block {
            y: y.clone(),
            dty: matmul_tn(&self.basis, y)?,
        })
    }

    pub fn zero_code(&self, cols: usize) -> Tensor {
        Tensor::zeros(vec![self.code_rows(), cols])
    }

    fn check_code(&self, g: &Tensor, blk: &Block) -> Result<()> {
        if g.shape() != [self.code_rows(), blk.y.cols()] {
            return Err(Error::dim(
                "iteration map",
                format!("code {:?}, expected [{}, {}]", g.shape(), self.code_rows(), blk.y.cols()),
            ));
        }
        Ok(())
    }

    /// One application of the map.
    pub fn apply(&self, blk: &Block, g: &Tensor, p: &MapParams) -> Result<Tensor> {
        self.check(&p.scalars)?;
        self.check_code(g, blk)?;
        let b = self.b;
        let mut rhs = blk.dty.clone();
        if self.has_soft() {
            let tau = p.scalars.mu() / b;
            for (r, &gv) in rhs.data_mut().iter_mut().zip(g.data()) {
                *r += b * soft(gv, tau);
            }
        }
        if self.has_denoiser() {
            let n = p.prior.apply(&matmul(&self.basis, g)?)?;
            rhs.axpy(b, &matmul_tn(&self.basis, &n)?)?;
        }
        self.chol.solve(&rhs)
    }

    /// One application of the map, keeping what its VJP needs.
    pub fn trace<'a>(&'a self, blk: &Block, g: &Tensor, p: &MapParams<'a>) -> Result<MapTrace<'a>> {
        self.check(&p.scalars)?;
        self.check_code(g, blk)?;
        let b = self.b;
        let mu = p.scalars.mu();
        let mut rhs = blk.dty.clone();
        let mut soft_part = None;
        let mut sign_mask = None;
        if self.has_soft() {
            let tau = mu / b;
            let s = g.map(|v| soft(v, tau));
            let sm = g.map(|v| if v.abs() > tau { v.signum() } else { 0.0 });
            rhs.axpy(b, &s)?;
            soft_part = Some(s);
            sign_mask = Some(sm);
        }
        let mut den = None;
        if self.has_denoiser() {
            let x = matmul(&self.basis, g)?;
            let (out, tape) = match p.prior {
                Prior::Network(params) => {
                    let tape = DenoiserTape::record(params, &x)?;
                    (tape.output(), Some(tape))
                }
                Prior::Identity => (x, None),
            };
            let dtn = matmul_tn(&self.basis, &out)?;
            rhs.axpy(b, &dtn)?;
            den = Some(DenoiserPart { tape, dtn });
        }
        let out = self.chol.solve(&rhs)?;
        Ok(MapTrace {
            ctx: self,
            scalars: p.scalars,
            out,
            soft_part,
            sign_mask,
            den,
        })
    }

    /// `D G` or `D_S G_S`.
    pub fn reconstruct(&self, g: &Tensor) -> Result<Tensor> {
        matmul(&self.basis, g)
    }

    /// Wraps a code produced by this context.
    pub fn code(&self, g: Tensor) -> Result<CodeMatrix> {
        match &self.support {
            None => Ok(CodeMatrix::full(g)),
            Some(s) => CodeMatrix::restricted(g, s.clone()),
        }
    }

    /// One sweep of the three-variable scheme: `G` by the linear solve, then
    /// `V = soft(G, μ/b)`, then `Z = N(DG)`.
    pub fn hqs_step_full(&self, state: &HqsState, blk: &Block, p: &MapParams) -> Result<HqsState> {
        if self.form != Form::Full {
            return Err(Error::Precondition("hqs_step_full needs a full context".into()));
        }
        self.check(&p.scalars)?;
        self.check_code(&state.g, blk)?;
        let b = self.b;
        let mut rhs = blk.dty.clone();
        rhs.axpy(b, &state.v)?;
        rhs.axpy(b, &matmul_tn(&self.basis, &state.z)?)?;
        let g = self.chol.solve(&rhs)?;
        let tau = p.scalars.mu() / b;
        let v = g.map(|x| soft(x, tau));
        let z = p.prior.apply(&matmul(&self.basis, &g)?)?;
        Ok(HqsState { g, v, z })
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }
}

fn add_diag(a: &mut Tensor, v: f64) {
    for i in 0..a.rows() {
        let x = a.at(i, i);
        a.set(i, i, x + v);
    }
}

struct DenoiserPart {
    tape: Option<DenoiserTape>,
    /// `basisᵀ N(basis·G)`
    dtn: Tensor,
}

/// A recorded map application.
pub struct MapTrace<'a> {
    ctx: &'a SolverContext,
    scalars: ScalarParams,
    out: Tensor,
    soft_part: Option<Tensor>,
    sign_mask: Option<Tensor>,
    den: Option<DenoiserPart>,
}

/// Cotangents of one map application.
#[derive(Clone, Debug)]
pub struct MapGrad {
    pub g: Tensor,
    /// Denoiser weights and biases (`None` unless requested and present).
    pub theta: Option<FlatGrad>,
    pub raw_b: f64,
    pub raw_mu: f64,
}

impl MapTrace<'_> {
    pub fn output(&self) -> &Tensor {
        &self.out
    }

    /// Bytes retained by this trace.
    pub fn bytes(&self) -> usize {
        let mut n = self.out.len();
        n += self.soft_part.as_ref().map_or(0, Tensor::len);
        n += self.sign_mask.as_ref().map_or(0, Tensor::len);
        let mut bytes = n * 8;
        if let Some(d) = &self.den {
            bytes += d.dtn.len() * 8 + d.tape.as_ref().map_or(0, DenoiserTape::bytes);
        }
        bytes
    }

    /// Pulls `cot` (shaped like the output) back to the input code and, when
    /// `want_params`, to the parameters.
    pub fn vjp(&self, cot: &Tensor, want_params: bool) -> Result<MapGrad> {
        cot.expect_same_shape("map vjp", &self.out)?;
        let ctx = self.ctx;
        let b = ctx.b;
        let mu = self.scalars.mu();
        let w = ctx.chol.solve(cot)?;
        let mut cot_g = Tensor::zeros(self.out.shape().to_vec());
        let mut cot_b = 0.0;
        let mut cot_mu = 0.0;
        if want_params {
            // system matrix derivative: dA/db
            let da_out = match ctx.form {
                Form::Full | Form::Fast => matmul(&ctx.gram, &self.out)?,
                Form::SparseOnly => self.out.clone(),
            };
            cot_b -= w.dot(&da_out)?;
        }
        if let (Some(s), Some(sm)) = (&self.soft_part, &self.sign_mask) {
            for ((c, &wv), &m) in cot_g.data_mut().iter_mut().zip(w.data()).zip(sm.data()) {
                *c += b * wv * m.abs();
            }
            if want_params {
                let wsm = w.dot(sm)?;
                cot_b += w.dot(s)? + (mu / b) * wsm;
                cot_mu -= wsm;
            }
        }
        let mut theta = None;
        if let Some(den) = &self.den {
            if want_params {
                cot_b += w.dot(&den.dtn)?;
            }
            let pulled = matmul(&ctx.basis, &w)?.scale(b);
            let cot_x = match &den.tape {
                Some(tape) => {
                    let (cx, ct) = tape.vjp(&pulled, want_params)?;
                    theta = ct;
                    cx
                }
                None => pulled,
            };
            cot_g.axpy(1.0, &matmul_tn(&ctx.basis, &cot_x)?)?;
        }
        Ok(MapGrad {
            g: cot_g,
            theta,
            raw_b: cot_b * sigmoid(self.scalars.raw_b),
            raw_mu: cot_mu * sigmoid(self.scalars.raw_mu),
        })
    }
}

/// Shared support of a block: OMP on its centroid spectrum.
pub fn select_support(y: &Tensor, dict: &Dictionary, s: usize, eps: f64) -> Result<SupportSet> {
    let (d, n) = y.expect_matrix("select_support")?;
    if n == 0 {
        return Err(Error::Precondition("block has no signals".into()));
    }
    let centroid: Vec<f64> = (0..d).map(|r| y.row(r).iter().sum::<f64>() / n as f64).collect();
    Ok(omp(&centroid, dict, s, eps)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(b: f64, mu: f64) -> ScalarParams {
        ScalarParams::from_realized(b, mu).unwrap()
    }

    #[test]
    fn identity_dictionary_first_step_is_a_third() {
        let dict = Dictionary::new(Tensor::eye(4)).unwrap();
        let sc = scalars(1.0, 0.1);
        let ctx = SolverContext::full(&dict, sc).unwrap();
        let y = Tensor::from_fn(vec![4, 4], |i| i as f64 * 0.25 - 1.0);
        let blk = ctx.prepare(&y).unwrap();
        let state = HqsState {
            g: Tensor::zeros(vec![4, 4]),
            v: Tensor::zeros(vec![4, 4]),
            z: Tensor::zeros(vec![4, 4]),
        };
        let p = MapParams::new(Prior::Identity, sc);
        let next = ctx.hqs_step_full(&state, &blk, &p).unwrap();
        let expect = y.scale(1.0 / 3.0);
        assert!(next.g.sub(&expect).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn large_threshold_zeroes_v() {
        let dict = Dictionary::random(4, 6, 1).unwrap();
        let sc = scalars(1.0, 100.0);
        let ctx = SolverContext::full(&dict, sc).unwrap();
        let y = Tensor::from_fn(vec![4, 4], |i| (i as f64).sin());
        let blk = ctx.prepare(&y).unwrap();
        let p = MapParams::new(Prior::Identity, sc);
        let s = ctx.hqs_step_full(&HqsState::initial(6, &y), &blk, &p).unwrap();
        assert!(s.v.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_context_is_reported() {
        let dict = Dictionary::random(4, 6, 1).unwrap();
        let ctx = SolverContext::full(&dict, scalars(1.0, 0.1)).unwrap();
        let y = Tensor::zeros(vec![4, 1]);
        let blk = ctx.prepare(&y).unwrap();
        let p = MapParams::new(Prior::Identity, scalars(1.5, 0.1));
        let r = ctx.apply(&blk, &ctx.zero_code(1), &p);
        assert!(matches!(r, Err(Error::StaleContext { .. })));
    }

    #[test]
    fn map_equals_substituted_sweep() {
        let dict = Dictionary::random(4, 7, 2).unwrap();
        let params = DenoiserParams::init(4, 3, 5).unwrap();
        let sc = scalars(0.8, 0.05);
        let ctx = SolverContext::full(&dict, sc).unwrap();
        let y = Tensor::from_fn(vec![4, 9], |i| (i as f64 * 0.37).cos());
        let blk = ctx.prepare(&y).unwrap();
        let p = MapParams::new(Prior::Network(&params), sc);
        let g = Tensor::from_fn(vec![7, 9], |i| (i as f64 * 0.11).sin());
        let tau = sc.mu() / sc.b();
        let state = HqsState {
            g: g.clone(),
            v: g.map(|v| soft(v, tau)),
            z: denoise(&params, &matmul(dict.matrix(), &g).unwrap()).unwrap(),
        };
        let swept = ctx.hqs_step_full(&state, &blk, &p).unwrap();
        let mapped = ctx.apply(&blk, &g, &p).unwrap();
        assert!(swept.g.sub(&mapped).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn dead_branches_leave_a_linear_solve() {
        let dict = Dictionary::random(4, 6, 3).unwrap();
        let params = DenoiserParams::zeros(4, 3);
        let sc = scalars(0.7, 1e6);
        let ctx = SolverContext::full(&dict, sc).unwrap();
        let y = Tensor::from_fn(vec![4, 4], |i| (i as f64 * 0.5).sin());
        let blk = ctx.prepare(&y).unwrap();
        let out = ctx
            .apply(&blk, &ctx.zero_code(4), &MapParams::new(Prior::Network(&params), sc))
            .unwrap();
        let mut a = dict.gram().scale(1.0 + sc.b());
        add_diag(&mut a, 1.0);
        let expect = crate::autodiff::chol_solve(&a, &matmul_tn(dict.matrix(), &y).unwrap()).unwrap();
        assert!(out.sub(&expect).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn fast_map_on_orthonormal_basis_divides_by_one_plus_b() {
        let dict = Dictionary::new(Tensor::eye(3)).unwrap();
        let support = SupportSet::new(vec![0, 1, 2], 3).unwrap();
        let sc = scalars(1.5, 0.1);
        let ctx = SolverContext::fast(&dict, support, sc).unwrap();
        let params = DenoiserParams::zeros(3, 2);
        let y = Tensor::from_fn(vec![3, 4], |i| i as f64 - 5.0);
        let blk = ctx.prepare(&y).unwrap();
        let out = ctx
            .apply(&blk, &ctx.zero_code(4), &MapParams::new(Prior::Network(&params), sc))
            .unwrap();
        let expect = y.scale(1.0 / (1.0 + sc.b()));
        assert!(out.sub(&expect).unwrap().max_abs() < 1e-7);
    }

    #[test]
    fn support_of_identical_columns_uses_that_column() {
        let dict = Dictionary::random(6, 10, 4).unwrap();
        let col: Vec<f64> = (0..6).map(|i| i as f64 * 0.2 - 0.3).collect();
        let y = Tensor::from_fn(vec![6, 5], |i| col[i / 5]);
        let s = select_support(&y, &dict, 3, 1e-12).unwrap();
        let direct = omp(&col, &dict, 3, 1e-12).unwrap().0;
        assert_eq!(s, direct);
        let zero = select_support(&Tensor::zeros(vec![6, 5]), &dict, 3, 0.0).unwrap();
        assert!(zero.is_empty());
    }

    #[test]
    fn reconstruct_full_and_fast_agree_on_support_rows() {
        let dict = Dictionary::random(5, 8, 6).unwrap();
        let support = SupportSet::new(vec![1, 4, 6], 8).unwrap();
        let sc = scalars(1.0, 0.1);
        let full = SolverContext::full(&dict, sc).unwrap();
        let fast = SolverContext::fast(&dict, support.clone(), sc).unwrap();
        let gs = Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.3 - 1.0);
        let g = fast.code(gs.clone()).unwrap().to_full(8);
        let a = full.reconstruct(&g).unwrap();
        let b = fast.reconstruct(&gs).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-14);
        assert!(full.reconstruct(&Tensor::zeros(vec![8, 4])).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn oversized_support_is_rejected() {
        let dict = Dictionary::random(2, 5, 6).unwrap();
        let support = SupportSet::new(vec![0, 1, 2], 5).unwrap();
        assert!(matches!(
            SolverContext::fast(&dict, support, scalars(1.0, 0.1)),
            Err(Error::Precondition(_))
        ));
    }
}
