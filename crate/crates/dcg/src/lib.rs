//! Deterministic propagation of quantized probability distributions through
//! directed acyclic computational graphs.
//!
//! The crate is organized around one currency type, [`DiscreteMeasure`]: a
//! finite probability measure on the real line with sorted atoms. Everything
//! else manipulates that currency:
//!
//! * [`measure`] — discrete measures and exact 1-D Wasserstein-1 distances.
//! * [`quantize`] — the recursive mean-split quantizer `T(mu, n)`, its cell
//!   tree, compression of discrete measures, and exact quantization errors.
//! * [`gaussian`] — stable standard-normal machinery (tails, conditional
//!   means, the omega sequence, dyadic quantization rates).
//! * [`graph`] — the computational-graph data model, validation, path
//!   accounting, and the propagation error bounds.
//! * [`engine`] — evaluation semantics: exact joint enumeration, the
//!   compressed-and-quantized frontier evaluator, and a seeded Monte Carlo
//!   baseline.
//! * [`sde`] — Euler–Maruyama schemes as staged graphs and the geometric
//!   Brownian motion error study.
//! * [`cli`] — the `dcg` command-line front end.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod cli;
pub mod engine;
mod error;
pub mod gaussian;
pub mod graph;
pub mod measure;
mod numeric;
mod plot;
pub mod quantize;
pub mod sde;

pub use error::{Error, Result};
pub use measure::{empirical_from_samples, wasserstein1, DiscreteMeasure};
pub use quantize::{compress, quantize_discrete, quantize_source, CellTree, SourceSpec};
