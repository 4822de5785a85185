//! Structure-preserving neural ODEs for stiff systems.
//!
//! The crate learns dynamics of the form `du/dt = A u + g(u)` where the
//! trainable linear operator has a provably bounded spectrum (a Hurwitz
//! factorization plus a fixed shift) and the trainable nonlinearity has a
//! controlled Lipschitz constant. Trajectories are advanced by a first-order
//! exponential integrator whose matrix exponential action is computed
//! matrix-free with a segmented truncated Taylor series, which keeps the
//! whole rollout differentiable end to end through the built-in reverse-mode
//! tape.
//!
//! Modules:
//! - [`autodiff`]: the reverse-mode tape and parameter store
//! - [`models`]: spectrum-bounded linear operators, Lipschitz-controlled and
//!   bilinear nonlinearities, autoencoders, and their composition
//! - [`expmv`]: φ-functions, the augmented-matrix step, and the segmented
//!   Taylor action of the matrix exponential
//! - [`integrators`]: exponential, implicit-explicit and reference steppers
//! - [`problems`]: built-in benchmark systems and dataset generation
//! - [`training`]: loss, Adam, the training loop and evaluation statistics
//! - [`io`]: checkpoint and dataset file formats
//!
//! Everything numeric is generic over [`Scalar`] (f32 or f64); concrete code
//! should use the [`Real`] alias.

pub mod autodiff;
pub mod error;
pub mod expmv;
pub mod integrators;
pub mod io;
pub mod linalg;
pub mod models;
pub mod problems;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// The scalar type used by the trainers, the CLI and the file formats.
pub type Real = f64;

/// Tape specialized to the default scalar.
pub type Tape64 = autodiff::Tape<Real>;
/// Parameter store specialized to the default scalar.
pub type ParamStore64 = autodiff::ParamStore<Real>;
