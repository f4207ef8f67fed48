//! Minimal deterministic deep-learning engine for dense volumetric networks.
//!
//! Everything is hand-written forward/backward over flat buffers: no graph,
//! no hidden state, no nondeterministic reductions. Ops are generic over
//! [`Scalar`] so the same kernels run in f32 for training/inference and in
//! f64 for finite-difference gradient verification.

pub mod ops;
pub mod scalar;
pub mod store;
pub mod vol;

pub use scalar::Scalar;
pub use store::{ParamId, ParamStore};
pub use vol::Vol;
