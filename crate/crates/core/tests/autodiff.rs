mod common;

use std::sync::Arc;

use common::{fd_grad, inner, randn, rel_err, rng, with_data};
use deqsc::autodiff::ops::soft;
use deqsc::autodiff::{
    chol_solve, chol_solve_vjp, conv2d, matmul, matmul_tn, Cholesky, CholSolve, Conv2d, DiffOp,
    MatMul, Relu, SoftThreshold, Tape, Tensor,
};
use proptest::prelude::*;
use rand::Rng;

/// Reverse-mode cotangents of every input of `op` for the loss `⟨cot, op(inputs)⟩`,
/// next to their central-difference estimates.
fn tape_and_fd(op: Arc<dyn DiffOp>, inputs: &[Tensor], cot: &Tensor, h: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = tape.apply(op.clone(), &leaves).unwrap();
    let grads = tape.backward(out, cot.clone(), &leaves).unwrap();
    inputs
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let fd = fd_grad(t.data(), h, |x| {
                let mut probe: Vec<Tensor> = inputs.to_vec();
                probe[k] = with_data(t, x);
                let refs: Vec<&Tensor> = probe.iter().collect();
                inner(cot, &op.forward(&refs).unwrap())
            });
            (grads[k].data().to_vec(), fd)
        })
        .collect()
}

#[test]
fn matmul_vjp_matches_finite_differences() {
    let mut r = rng(1);
    let (a, b, cot) = (randn(&[3, 4], &mut r), randn(&[4, 2], &mut r), randn(&[3, 2], &mut r));
    for (g, fd) in tape_and_fd(Arc::new(MatMul), &[a, b], &cot, 1e-6) {
        assert!(rel_err(&g, &fd) < 1e-7, "rel err {}", rel_err(&g, &fd));
    }
}

#[test]
fn conv2d_vjp_matches_finite_differences() {
    let mut r = rng(2);
    let x = randn(&[2, 5, 5], &mut r);
    let w = randn(&[3, 2, 3, 3], &mut r);
    let b = randn(&[3], &mut r);
    let cot = randn(&[3, 5, 5], &mut r);
    for (g, fd) in tape_and_fd(Arc::new(Conv2d), &[x, w, b], &cot, 1e-6) {
        assert!(rel_err(&g, &fd) < 1e-6, "rel err {}", rel_err(&g, &fd));
    }
}

#[test]
fn relu_and_soft_threshold_vjps_match_away_from_kinks() {
    let mut r = rng(3);
    // keep every entry at least 0.1 away from a kink so the step never crosses one
    let x = Tensor::from_fn(vec![4, 6], |i| {
        let v: f64 = r.random_range(0.1..2.0);
        if i % 2 == 0 { v } else { -v }
    });
    let cot = randn(&[4, 6], &mut r);
    for (g, fd) in tape_and_fd(Arc::new(Relu), &[x.clone()], &cot, 1e-6) {
        assert!(rel_err(&g, &fd) < 1e-9);
    }
    let shifted = x.map(|v| v + v.signum() * 0.5);
    let tau = Tensor::new(vec![1], vec![0.45]).unwrap();
    for (g, fd) in tape_and_fd(Arc::new(SoftThreshold), &[shifted, tau], &cot, 1e-6) {
        assert!(rel_err(&g, &fd) < 1e-8);
    }
}

fn random_spd(n: usize, r: &mut impl rand::Rng) -> Tensor {
    let m = randn(&[n, n], r);
    let mut a = matmul_tn(&m, &m).unwrap();
    for i in 0..n {
        a.set(i, i, a.at(i, i) + n as f64);
    }
    a
}

#[test]
fn cholesky_solve_residual_is_tiny_on_random_spd() {
    let mut r = rng(4);
    for _ in 0..20 {
        let a = random_spd(6, &mut r);
        let b = randn(&[6, 3], &mut r);
        let x = chol_solve(&a, &b).unwrap();
        let resid = matmul(&a, &x).unwrap().sub(&b).unwrap();
        assert!(resid.norm() / b.norm() < 1e-12);
    }
}

#[test]
fn cholesky_solve_vjp_matches_finite_differences() {
    let mut r = rng(5);
    let a = random_spd(5, &mut r);
    let b = randn(&[5, 2], &mut r);
    let cot = randn(&[5, 2], &mut r);
    let chol = Cholesky::factor(&a).unwrap();
    let x = chol.solve(&b).unwrap();
    let [ga, gb] = chol_solve_vjp(&chol, &x, &cot, [true, true]).unwrap();
    // A is parametrized as sym(P) so the perturbation stays symmetric
    let sym = |p: &[f64]| {
        Tensor::from_fn(vec![5, 5], |k| {
            let (i, j) = (k / 5, k % 5);
            0.5 * (p[i * 5 + j] + p[j * 5 + i])
        })
    };
    let fd_a = fd_grad(a.data(), 1e-6, |p| inner(&cot, &chol_solve(&sym(p), &b).unwrap()));
    let fd_b = fd_grad(b.data(), 1e-6, |p| inner(&cot, &chol_solve(&a, &with_data(&b, p)).unwrap()));
    assert!(rel_err(ga.unwrap().data(), &fd_a) < 1e-5);
    assert!(rel_err(gb.unwrap().data(), &fd_b) < 1e-5);
    let tape_grads = tape_and_fd(Arc::new(CholSolve), &[a, b], &cot, 1e-6);
    assert!(rel_err(&tape_grads[1].0, &tape_grads[1].1) < 1e-5);
}

#[test]
fn forward_ops_are_bitwise_deterministic() {
    let mut r = rng(6);
    let x = randn(&[3, 7, 7], &mut r);
    let w = randn(&[4, 3, 3, 3], &mut r);
    let b = randn(&[4], &mut r);
    let first = conv2d(&x, &w, &b).unwrap();
    for _ in 0..3 {
        assert_eq!(conv2d(&x, &w, &b).unwrap(), first);
    }
    let a = randn(&[17, 33], &mut r);
    let c = randn(&[33, 9], &mut r);
    assert_eq!(matmul(&a, &c).unwrap(), matmul(&a, &c).unwrap());
}

proptest! {
    #[test]
    fn soft_threshold_is_odd_and_one_lipschitz(
        x in -10.0f64..10.0,
        y in -10.0f64..10.0,
        tau in 1e-3f64..5.0,
    ) {
        prop_assert_eq!(soft(-x, tau), -soft(x, tau));
        prop_assert!((soft(x, tau) - soft(y, tau)).abs() <= (x - y).abs() + 1e-15);
    }

    #[test]
    fn matmul_vjp_is_linear_in_the_cotangent(seed in 0u64..1000, s in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (a, b, cot) = (randn(&[3, 4], &mut r), randn(&[4, 2], &mut r), randn(&[3, 2], &mut r));
        let op = MatMul;
        let g1 = op.vjp(&[&a, &b], &matmul(&a, &b).unwrap(), &cot, &[true, true]).unwrap();
        let g2 = op.vjp(&[&a, &b], &matmul(&a, &b).unwrap(), &cot.scale(s), &[true, true]).unwrap();
        for (x, y) in g1.iter().zip(&g2) {
            let (x, y) = (x.as_ref().unwrap(), y.as_ref().unwrap());
            prop_assert!(x.scale(s).sub(y).unwrap().max_abs() <= 1e-12 * (1.0 + y.max_abs()));
        }
    }

    #[test]
    fn conv2d_vjp_matches_finite_differences_on_random_shapes(
        seed in 0u64..1000,
        ci in 1usize..4,
        co in 1usize..4,
        h in 1usize..6,
        w in 1usize..6,
    ) {
        let mut r = rng(seed);
        let x = randn(&[ci, h, w], &mut r);
        let k = randn(&[co, ci, 3, 3], &mut r);
        let b = randn(&[co], &mut r);
        let cot = randn(&[co, h, w], &mut r);
        for (g, fd) in tape_and_fd(Arc::new(Conv2d), &[x, k, b], &cot, 1e-6) {
            prop_assert!(rel_err(&g, &fd) < 1e-5);
        }
    }
}
