//! `ntklab` is a numerical laboratory for the training dynamics of a constructed
//! multi-layer decoder-only transformer in the neural-tangent-kernel regime.
//!
//! The crate covers the full loop at desk scale:
//!
//! * [`data_synth`] draws unit-norm token sequences and noisy teacher targets.
//! * [`model`] holds the transformer and its cached forward pass.
//! * [`grad`] provides three gradient engines (layerwise analytic, exact reverse
//!   mode, central differences) and cross-checks among them.
//! * [`kernel`] assembles the layerwise tangent kernels and audits their spectra.
//! * [`training`] integrates gradient flow with explicit Euler steps on mini-batches.
//! * [`ntk_regression`] is the infinite-width kernel-regression oracle.
//! * [`scaling_law`] evaluates the budget algebra and fits two-stage risk curves.
//! * [`diagnostics`] turns the helpful-bounds toolkit into runtime checks.
//! * [`expcli`] orchestrates reproducible runs behind the `ntklab` binary.

pub mod data_synth;
pub mod diagnostics;
pub mod error;
pub mod expcli;
pub mod grad;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod ntk_regression;
pub mod persist;
pub mod rng;
pub mod scaling_law;
pub mod training;

pub use error::{Error, Result};
