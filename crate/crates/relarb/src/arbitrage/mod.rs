//! Optimal initial proportion ũ, its generator and gradients, and the
//! boundary test for existence of relative arbitrage.

pub mod conditional;
pub mod fd;
pub mod fichera;
pub mod generator;
pub mod mc;

pub use conditional::{node_gradient, node_moments, NodeGradient, NodeMoments, Regression};
pub use fd::{solve_cauchy_fd, Boundary, CauchyGrid, FdSpec};
pub use fichera::{fichera_check, FaceKind, FicheraBox, FaceRecord, FaceVerdict, FicheraReport, GlobalVerdict};
pub use generator::{apply_generator, LocalJet, Stencil};
pub use mc::{
    estimate_from_state, estimate_u_mc, grad_log_u, normalized_samples, ArbitrageEstimate, BasePoint, BumpSpec,
    GradientBlock, Target,
};
