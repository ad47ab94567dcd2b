//! Entropic multimarginal optimal transport at desk scale.
//!
//! This crate implements three estimation stacks over a shared set of domain
//! types:
//!
//! * **Sinkhorn solvers** ([`sinkhorn`]): log-domain block-coordinate ascent
//!   on the entropic dual, with a dense path for arbitrary cost graphs and a
//!   matrix-product path for circle graphs that never materializes the plan
//!   tensor.
//! * **Neural dual estimation** ([`nemot`] on top of [`neural`]): one small
//!   ReLU network per marginal trained by mini-batch gradient ascent on the
//!   entropic dual objective, with exact hand-derived gradients, Adam, global
//!   norm clipping, and a stepwise learning-rate schedule. Circle graphs
//!   additionally get a U-statistic objective evaluated through traces of
//!   scaling-matrix products ([`circle`]).
//! * **Gromov–Wasserstein alignment** ([`emgw`]): the entropic multimarginal
//!   GW objective split into a moment term plus an inner transport problem
//!   linearized by per-edge auxiliary matrices, solved by alternating
//!   projected-gradient steps with either Sinkhorn or the neural estimator
//!   inside.
//!
//! Synthetic data generators and the portable on-disk dataset format live in
//! [`datagen`]; shared dense kernels in [`numerics`].
//!
//! All floating-point work is `f64`. Every reduction order is fixed, and all
//! randomness flows through labeled ChaCha8 streams ([`rng`]), so any fixed
//! seed reproduces results bitwise on a given platform regardless of thread
//! count.

pub mod circle;
pub mod datagen;
pub mod emgw;
pub mod error;
pub mod model;
pub mod nemot;
pub mod neural;
pub mod numerics;
pub mod rng;
pub mod sinkhorn;

pub use error::{MmotError, Result};
