//! Differentiable primitives with hand-written vector-Jacobian products.
//!
//! Each primitive is available both as a free function (used directly by the
//! solvers on hot paths) and as a [`DiffOp`] that can be recorded on a
//! [`Tape`](super::tape::Tape).

use super::tensor::{gemm, Operand, Tensor};
use crate::error::{Error, Result};

/// A differentiable operation: a pure forward map plus its VJP.
pub trait DiffOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Cotangents of every input flagged in `needs`, given the cotangent of
    /// the output. Entries not needed are `None`.
    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        cot: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

fn arity(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::dim(op, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// matmul

pub struct MatMul;

impl DiffOp for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("matmul", inputs, 2)?;
        super::tensor::matmul(inputs[0], inputs[1])
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        cot: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let cot_a = if needs[0] {
            Some(super::tensor::matmul_nt(cot, b)?)
        } else {
            None
        };
        let cot_b = if needs[1] {
            Some(super::tensor::matmul_tn(a, cot)?)
        } else {
            None
        };
        Ok(vec![cot_a, cot_b])
    }
}

// ---------------------------------------------------------------------------
// conv2d (3x3, stride 1, zero padding 1)

const K: usize = 3;
const TAPS: usize = K * K;

fn check_conv(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if weight.shape().len() != 4 {
        return Err(Error::dim("conv2d", format!("weight shape {:?}", weight.shape())));
    }
    let (co, ci, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if kh != K || kw != K {
        return Err(Error::UnsupportedKernel(kh, kw));
    }
    if x.shape().len() != 3 || x.shape()[0] != ci {
        return Err(Error::dim(
            "conv2d",
            format!("input {:?} vs weight {:?}", x.shape(), weight.shape()),
        ));
    }
    if bias.shape() != [co] {
        return Err(Error::dim("conv2d", format!("bias {:?}, {co} channels", bias.shape())));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if h == 0 || w == 0 {
        return Err(Error::dim("conv2d", "empty spatial extent"));
    }
    Ok((co, ci, h, w))
}

/// Unfolds a `c x h x w` image into a `(c*9) x (h*w)` patch matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * TAPS * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((ch * TAPS) + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch cotangents back onto the image.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((ch * TAPS) + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// Same-size 3x3 cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (co, ci, h, w) = check_conv(x, weight, bias)?;
    let hw = h * w;
    let cols = im2col(x.data(), ci, h, w);
    let mut out = vec![0.0; co * hw];
    for (o, &b) in bias.data().iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(b);
    }
    gemm(
        1.0,
        Operand::plain(weight.data(), co, ci * TAPS),
        Operand::plain(&cols, ci * TAPS, hw),
        1.0,
        &mut out,
    );
    Ok(Tensor::from_parts(vec![co, h, w], out))
}

/// Cotangents of [`conv2d`] with respect to `(x, weight, bias)`.
pub fn conv2d_vjp(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    cot: &Tensor,
    needs: [bool; 3],
) -> Result<[Option<Tensor>; 3]> {
    let (co, ci, h, w) = check_conv(x, weight, bias)?;
    let hw = h * w;
    if cot.shape() != [co, h, w] {
        return Err(Error::dim("conv2d_vjp", format!("cotangent {:?}", cot.shape())));
    }
    let cot_x = if needs[0] {
        let mut cot_cols = vec![0.0; ci * TAPS * hw];
        gemm(
            1.0,
            Operand::transposed(weight.data(), co, ci * TAPS),
            Operand::plain(cot.data(), co, hw),
            0.0,
            &mut cot_cols,
        );
        Some(Tensor::from_parts(vec![ci, h, w], col2im(&cot_cols, ci, h, w)))
    } else {
        None
    };
    let cot_w = if needs[1] {
        let cols = im2col(x.data(), ci, h, w);
        let mut gw = vec![0.0; co * ci * TAPS];
        gemm(
            1.0,
            Operand::plain(cot.data(), co, hw),
            Operand::transposed(&cols, ci * TAPS, hw),
            0.0,
            &mut gw,
        );
        Some(Tensor::from_parts(vec![co, ci, K, K], gw))
    } else {
        None
    };
    let cot_b = if needs[2] {
        let gb = (0..co).map(|o| cot.data()[o * hw..(o + 1) * hw].iter().sum()).collect();
        Some(Tensor::from_parts(vec![co], gb))
    } else {
        None
    };
    Ok([cot_x, cot_w, cot_b])
}

pub struct Conv2d;

impl DiffOp for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("conv2d", inputs, 3)?;
        conv2d(inputs[0], inputs[1], inputs[2])
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        cot: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let r = conv2d_vjp(
            inputs[0],
            inputs[1],
            inputs[2],
            cot,
            [needs[0], needs[1], needs[2]],
        )?;
        Ok(r.into())
    }
}

// ---------------------------------------------------------------------------
// relu

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Cotangent masked by `x > 0`; the kink at zero gets subgradient 0.
pub fn relu_vjp(x: &Tensor, cot: &Tensor) -> Result<Tensor> {
    x.zip_map(cot, |v, c| if v > 0.0 { c } else { 0.0 })
}

pub struct Relu;

impl DiffOp for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("relu", inputs, 1)?;
        Ok(relu(inputs[0]))
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        cot: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![if needs[0] {
            Some(relu_vjp(inputs[0], cot)?)
        } else {
            None
        }])
    }
}

// ---------------------------------------------------------------------------
// soft threshold

#[inline]
pub fn soft(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

/// Elementwise shrinkage `sign(x) * max(|x| - tau, 0)`.
pub fn soft_threshold(x: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("soft threshold needs tau > 0, got {tau}")));
    }
    Ok(x.map(|v| soft(v, tau)))
}

/// Cotangents of [`soft_threshold`] with respect to `x` and `tau`.
///
/// The derivative is taken as zero on the boundary `|x| == tau`.
pub fn soft_threshold_vjp(x: &Tensor, tau: f64, cot: &Tensor) -> Result<(Tensor, f64)> {
    let cot_x = x.zip_map(cot, |v, c| if v.abs() > tau { c } else { 0.0 })?;
    let cot_tau = x
        .data()
        .iter()
        .zip(cot.data())
        .map(|(&v, &c)| {
            if v > tau {
                -c
            } else if v < -tau {
                c
            } else {
                0.0
            }
        })
        .sum();
    Ok((cot_x, cot_tau))
}

/// Soft threshold as a two-input op: `(x, tau)` with `tau` a one-element tensor.
pub struct SoftThreshold;

impl DiffOp for SoftThreshold {
    fn name(&self) -> &'static str {
        "soft_threshold"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("soft_threshold", inputs, 2)?;
        soft_threshold(inputs[0], scalar_of(inputs[1])?)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        cot: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (cx, ct) = soft_threshold_vjp(inputs[0], scalar_of(inputs[1])?, cot)?;
        Ok(vec![
            needs[0].then_some(cx),
            needs[1].then(|| Tensor::from_parts(vec![1], vec![ct])),
        ])
    }
}

fn scalar_of(t: &Tensor) -> Result<f64> {
    if t.len() != 1 {
        return Err(Error::dim("scalar", format!("expected one element, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

// ---------------------------------------------------------------------------
// Cholesky

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factorizes `a = L Lᵀ`. Only the lower triangle of `a` is read.
    pub fn factor(a: &Tensor) -> Result<Self> {
        let (n, n2) = a.expect_matrix("cholesky")?;
        if n != n2 {
            return Err(Error::dim("cholesky", format!("{n}x{n2} is not square")));
        }
        let src = a.data();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = src[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            let scale = src[j * n + j].abs().max(1.0);
            if !(d > 1e-14 * scale) {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = src[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A X = B` for a matrix right-hand side `B` (`n x k`).
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let (r, k) = b.expect_matrix("chol_solve")?;
        if r != self.n {
            return Err(Error::dim("chol_solve", format!("A is {0}x{0}, B is {r}x{k}", self.n)));
        }
        let mut x = b.data().to_vec();
        self.solve_in_place(&mut x, k);
        Ok(Tensor::from_parts(vec![r, k], x))
    }

    /// Solves in place on a row-major `n x k` buffer. Rows are updated as
    /// whole slices so the inner loops stream contiguous memory.
    pub fn solve_in_place(&self, x: &mut [f64], k: usize) {
        let n = self.n;
        let l = &self.lower;
        // forward: L z = b
        for i in 0..n {
            let (done, rest) = x.split_at_mut(i * k);
            let row = &mut rest[..k];
            for j in 0..i {
                let lij = l[i * n + j];
                if lij != 0.0 {
                    let prev = &done[j * k..(j + 1) * k];
                    row.iter_mut().zip(prev).for_each(|(r, p)| *r -= lij * p);
                }
            }
            let lii = l[i * n + i];
            row.iter_mut().for_each(|r| *r /= lii);
        }
        // backward: Lᵀ x = z
        for i in (0..n).rev() {
            let (head, tail) = x.split_at_mut((i + 1) * k);
            let row = &mut head[i * k..];
            for j in i + 1..n {
                let lji = l[j * n + i];
                if lji != 0.0 {
                    let next = &tail[(j - i - 1) * k..(j - i) * k];
                    row.iter_mut().zip(next).for_each(|(r, p)| *r -= lji * p);
                }
            }
            let lii = l[i * n + i];
            row.iter_mut().for_each(|r| *r /= lii);
        }
    }
}

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn chol_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Cholesky::factor(a)?.solve(b)
}

/// Cotangents of [`chol_solve`]: `cot_B = A⁻¹ cot`, `cot_A = -sym(A⁻¹ cot Xᵀ)`.
pub fn chol_solve_vjp(
    chol: &Cholesky,
    x: &Tensor,
    cot: &Tensor,
    needs: [bool; 2],
) -> Result<[Option<Tensor>; 2]> {
    let cot_b = chol.solve(cot)?;
    let cot_a = if needs[0] {
        let outer = super::tensor::matmul_nt(&cot_b, x)?;
        let n = outer.rows();
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = -0.5 * (outer.at(i, j) + outer.at(j, i));
            }
        }
        Some(Tensor::from_parts(vec![n, n], sym))
    } else {
        None
    };
    Ok([cot_a, needs[1].then_some(cot_b)])
}

pub struct CholSolve;

impl DiffOp for CholSolve {
    fn name(&self) -> &'static str {
        "chol_solve"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("chol_solve", inputs, 2)?;
        chol_solve(inputs[0], inputs[1])
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        cot: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let chol = Cholesky::factor(inputs[0])?;
        Ok(chol_solve_vjp(&chol, output, cot, [needs[0], needs[1]])?.into())
    }
}
