//! Adversarial audio defense toolkit.
//!
//! Defends keyword classifiers against adversarial audio by projecting input
//! spectrograms onto a safe latent subspace of a generative model and
//! re-synthesizing them. The pieces:
//!
//! - [`dsp`] — WAV I/O, STFT analysis, mel features, Griffin-Lim reconstruction
//! - [`schur`] — complex Schur decomposition, eigenvalue chordal distances,
//!   span regularization, rank tuning
//! - [`nn`] — minimal tensor + reverse-mode autodiff engine, Adam,
//!   weight/spectral normalization, checkpoints
//! - [`gan`] — generator + five critics trained under the Sobolev IPM
//!   Lagrangian with an optional Hölder-bound hinge constraint
//! - [`projection`] — the safe-latent-vector search and the end-to-end defense
//! - [`adversary`] — desk-scale victim classifier plus genetic and PGD attacks
//! - [`metrics`] — WER/SLA transcription metrics and segSNR/STOI/LLR signal
//!   quality metrics
//! - [`pipeline`] — experiment orchestration shared by the CLI

pub mod adversary;
pub mod dsp;
pub mod error;
pub mod mat;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod projection;
pub mod rng;
pub mod schur;

pub use error::{Error, Result};
