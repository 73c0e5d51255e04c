//! Dense tensors, differentiable primitives and a minimal reverse-mode tape.

pub mod ops;
pub mod tape;
pub mod tensor;

pub use ops::{
    chol_solve, chol_solve_vjp, conv2d, conv2d_vjp, relu, relu_vjp, soft_threshold,
    soft_threshold_vjp, CholSolve, Cholesky, Conv2d, DiffOp, MatMul, Relu, SoftThreshold,
};
pub use tape::{NodeId, Tape};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};
