//! Helpers shared by the integration tests.
#![allow(dead_code)]

use deqsc::autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Central differences of `f` along every coordinate of `x`.
pub fn fd_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Largest entrywise `|a − b| / max(|a|, |b|, floor)`.
pub fn max_entry_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn inner(a: &Tensor, b: &Tensor) -> f64 {
    a.dot(b).expect("same shape")
}

/// `Tensor` with `data` replaced.
pub fn with_data(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape().to_vec(), data.to_vec()).expect("finite data")
}

/// Clean/noisy synthetic cube pairs drawn from one random generating
/// dictionary.
pub fn desk_cubes(
    count: usize,
    side: usize,
    bands: usize,
    sigma_255: f64,
    seed: u64,
) -> Vec<(deqsc::data::HyperCube, deqsc::data::HyperCube)> {
    desk_cubes_with(count, side, bands, sigma_255, seed, 16.0, 4 * bands)
}

/// [`desk_cubes`] with a chosen region length-scale and generating library size.
pub fn desk_cubes_with(
    count: usize,
    side: usize,
    bands: usize,
    sigma_255: f64,
    seed: u64,
    smoothness: f64,
    library: usize,
) -> Vec<(deqsc::data::HyperCube, deqsc::data::HyperCube)> {
    use deqsc::data::{add_noise, synth_cube, NoiseModel, SynthConfig};
    let gen = deqsc::dictionary::Dictionary::random(bands, library, seed).unwrap();
    (0..count as u64)
        .map(|i| {
            let cfg = SynthConfig::new(side, side, 3, smoothness, seed.wrapping_mul(1000) + i);
            let clean = synth_cube(&gen, &cfg).unwrap();
            let noisy = add_noise(&clean, &NoiseModel::new(sigma_255, seed + 77 + i).unwrap());
            (clean, noisy)
        })
        .collect()
}

/// Every `(noisy, clean)` block pair of the given cubes.
pub fn desk_blocks(
    cubes: &[(deqsc::data::HyperCube, deqsc::data::HyperCube)],
    n: usize,
) -> Vec<(Tensor, Tensor)> {
    cubes
        .iter()
        .flat_map(|(clean, noisy)| deqsc::data::block_pairs(noisy, clean, n).unwrap())
        .collect()
}

/// Identity next to a scaled Sylvester-Hadamard basis; coherence `1/√d`.
pub fn incoherent(d: usize) -> deqsc::dictionary::Dictionary {
    let mut a = Tensor::zeros(vec![d, 2 * d]);
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..d {
        a.set(i, i, 1.0);
        for j in 0..d {
            let sign = if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            a.set(i, d + j, sign * scale);
        }
    }
    deqsc::dictionary::Dictionary::new(a).unwrap()
}

/// A small model with perturbed, re-normalized denoiser weights.
pub fn small_model(
    d: usize,
    m: usize,
    width: usize,
    variant: deqsc::hqs::Variant,
    sparsity: usize,
    seed: u64,
) -> deqsc::model::Model {
    use deqsc::denoiser::{DenoiserParams, ScalarParams};
    let dict = deqsc::dictionary::Dictionary::random(d, m, seed).unwrap();
    let mut den = DenoiserParams::init(d, width, seed + 1).unwrap();
    let flat: Vec<f64> = den.flatten();
    let noise = uniform(&[flat.len()], -0.2, 0.2, &mut rng(seed + 2));
    let moved: Vec<f64> = flat.iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    den.assign_flat(&moved).unwrap();
    let settled = den
        .layers
        .iter()
        .map(|l| deqsc::denoiser::ConvLayer::new(l.weight.clone(), l.bias.clone()).unwrap())
        .collect();
    let mut den = DenoiserParams::from_layers(settled).unwrap();
    den.spectral_normalize();
    let sc = ScalarParams::from_realized(0.5, 0.05).unwrap();
    deqsc::model::Model::new(dict, den, sc, variant, sparsity).unwrap()
}

/// Outcome of one implicit-gradient check against central differences.
pub struct FdCheck {
    /// Largest per-entry relative error.
    pub max_err: f64,
    pub params: usize,
    pub fwd_iters: usize,
}

/// DEQ gradient of `½‖basis·g* − x‖²` against central differences of the
/// same loss with tightly solved fixed points. `d = 6`, `N = 9`, `M = 8`.
pub fn deq_fd_check(variant: deqsc::hqs::Variant, seed: u64) -> FdCheck {
    use deqsc::anderson::AndersonConfig;
    use deqsc::deq::{deq_block_grad, deq_forward, DeqConfig};
    use deqsc::train::TrainSample;
    let model = small_model(6, 8, 3, variant, 3, seed);
    let noisy = uniform(&[6, 9], 0.0, 1.0, &mut rng(seed + 3));
    let clean = noisy.map(|v| 0.8 * v + 0.1);
    let mut sample = TrainSample::new(noisy.clone(), clean.clone()).unwrap();
    if variant == deqsc::hqs::Variant::Fast {
        sample.support = Some(model.support_for(&noisy).unwrap());
    }
    let tight = AndersonConfig {
        max_iters: 400,
        tol: 1e-14,
        ..AndersonConfig::default()
    };
    let cfg = DeqConfig {
        forward: tight.clone(),
        backward: tight.clone(),
    };
    let loss_at = |flat: &[f64]| {
        let mut m = model.clone();
        m.assign_flat(flat).unwrap();
        let ctx = m.block_context(None, &noisy, sample.support.as_ref()).unwrap();
        let blk = ctx.prepare(&noisy).unwrap();
        let rep = deq_forward(&ctx, &blk, &m.map_params(), &tight).unwrap();
        let r = ctx.reconstruct(&rep.solution).unwrap().sub(&clean).unwrap();
        0.5 * r.dot(&r).unwrap()
    };
    let ctx = model.block_context(None, &noisy, sample.support.as_ref()).unwrap();
    let analytic = deq_block_grad(&model, &ctx, &sample, &cfg).unwrap();
    let flat = model.flatten();
    let fd = fd_grad(&flat, 1e-5, loss_at);
    let scale = analytic.grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    FdCheck {
        max_err: max_entry_err(&analytic.grad, &fd, 1e-3 * scale),
        params: flat.len(),
        fwd_iters: analytic.fwd_iters,
    }
}

/// Lower Cholesky factor of a small SPD matrix.
pub fn cholesky(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut l = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.at(i, k) * l.at(j, k)).sum();
            if i == j {
                l.set(i, i, (a.at(i, i) - s).sqrt());
            } else {
                l.set(i, j, (a.at(i, j) - s) / l.at(j, j));
            }
        }
    }
    l
}

/// `L⁻¹ R` by forward substitution.
pub fn forward_solve(l: &Tensor, r: &Tensor) -> Tensor {
    let (n, m) = (l.rows(), r.cols());
    let mut x = Tensor::zeros(vec![n, m]);
    for c in 0..m {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l.at(i, k) * x.at(k, c)).sum();
            x.set(i, c, (r.at(i, c) - s) / l.at(i, i));
        }
    }
    x
}

/// `(TY, TD)` with `T = √b·L⁻¹`, `LLᵀ = DDᵀ + bI`, so that
/// `TᵀT = b(DDᵀ + bI)⁻¹`.
pub fn whiten(dmat: &Tensor, y: &Tensor, b: f64) -> (Tensor, Tensor) {
    let mut k = deqsc::autodiff::matmul_nt(dmat, dmat).unwrap();
    for i in 0..k.rows() {
        let x = k.at(i, i);
        k.set(i, i, x + b);
    }
    let l = cholesky(&k);
    (forward_solve(&l, y).scale(b.sqrt()), forward_solve(&l, dmat).scale(b.sqrt()))
}

/// Relative objective gap between `soft(g*, μ/b)` from the sparse-only map
/// and a long FISTA run on the equivalent whitened lasso.
///
/// The fixed point minimizes `½‖Y − DG‖² + μ‖V‖₁ + (b/2)‖G − V‖²`; the
/// minimum over `G` is `½‖T(Y − DV)‖²`.
pub fn sparse_only_lasso_gap(d: usize, m: usize, n: usize, b: f64, mu: f64, seed: u64) -> f64 {
    use deqsc::anderson::AndersonConfig;
    use deqsc::deq::deq_forward;
    use deqsc::dictionary::{fista_lasso, lasso_objective, Dictionary};
    use deqsc::hqs::{MapParams, Prior, SolverContext};
    let dict = Dictionary::random(d, m, seed).unwrap();
    let y = randn(&[d, n], &mut rng(seed + 1)).scale(0.5);
    let sc = deqsc::denoiser::ScalarParams::from_realized(b, mu).unwrap();
    let ctx = SolverContext::sparse_only(&dict, sc).unwrap();
    let blk = ctx.prepare(&y).unwrap();
    let cfg = AndersonConfig {
        max_iters: 20_000,
        tol: 1e-14,
        ..AndersonConfig::default()
    };
    let rep = deq_forward(&ctx, &blk, &MapParams::new(Prior::Identity, sc), &cfg).unwrap();
    let tau = mu / b;
    let v = rep.solution.map(|g| g.signum() * (g.abs() - tau).max(0.0));
    let (ty, td) = whiten(dict.matrix(), &y, b);
    let ours = lasso_objective(&ty, &td, &v, mu).unwrap();
    let reference = fista_lasso(&ty, &td, mu, 100_000, 0.0).unwrap().objective;
    let best = reference.min(ours);
    (ours - best) / best
}

/// `g ↦ Mg + c` with symmetric `M` of spectral radius `rho`.
pub fn contractive_affine(dim: usize, rho: f64, seed: u64) -> (Tensor, Tensor) {
    let a = randn(&[dim, dim], &mut rng(seed));
    let sym = deqsc::autodiff::matmul_nt(&a, &a).unwrap();
    let mut v = Tensor::filled(vec![dim, 1], 1.0);
    let mut top = 0.0;
    for _ in 0..20_000 {
        let w = deqsc::autodiff::matmul(&sym, &v).unwrap();
        top = w.norm() / v.norm();
        v = w.scale(1.0 / w.norm());
    }
    // eigenvalues of sym/top lie in [0, 1]; shift to [−ρ, ρ]
    let mut m = sym.scale(2.0 * rho / top);
    for i in 0..dim {
        let v = m.at(i, i);
        m.set(i, i, v - rho);
    }
    (m, randn(&[dim, 1], &mut rng(seed + 1)))
}
