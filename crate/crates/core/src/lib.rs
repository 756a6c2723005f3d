//! Bilinear autoencoders trained with the kernel trick.
//!
//! The library trains autoencoders whose latents are rank-1 bilinear forms
//! `f_j(x) = (l_j . x)(r_j . x)` of the input. Reconstruction targets the
//! product space `x ⊗ x`, but every loss is evaluated through the
//! (Lat × Lat) kernel `BB^T = (LL^T) ⊙ (RR^T)` so no In²-sized object is
//! ever materialised outside test oracles.
//!
//! Modules map onto the pipeline: [`data`] (normalisation, dump format,
//! synthetic generators), [`model`] and [`kernels`] (parameterisation and
//! blocked kernel evaluation), [`losses`] and [`grad`] (objectives and their
//! closed-form gradients), [`optim`] (orthogonalised-gradient steps),
//! [`trainer`] (loop, sweeps), [`analysis`] (manifold discovery, prefix
//! curves, histograms), [`similarity`] (exact weight-based comparison),
//! [`topk`] (the TopK baseline), and [`oracle`] (brute-force reference
//! implementations behind the `verify` subcommand).

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod grad;
pub mod kernels;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod similarity;
pub mod topk;
pub mod trainer;

pub use error::{Error, Result};
