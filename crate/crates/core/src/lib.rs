//! Desk-scale laboratory for Gumbel-noise distillation.
//!
//! An autoregressive teacher that samples with the Gumbel-Max trick commits,
//! at every position, to a noise vector that explains the token it emitted.
//! This crate extracts that noise after the fact ([`extraction`]), hands it to
//! parallel students as a conditioning signal ([`student_mdlm`],
//! [`student_mtp`]), and verifies the distributional claims that make the
//! whole scheme sound ([`harness`]). The maze corpus in [`maze`] is small
//! enough that the teacher can be an exact lookup table, which turns the
//! statistical tests into sharp ones.

pub mod ablation;
pub mod error;
pub mod extraction;
pub mod gumbel;
pub mod harness;
pub mod io;
pub mod maze;
pub mod nn;
pub mod rng;
pub mod stats;
pub mod student_mdlm;
pub mod student_mtp;
pub mod teacher;
pub mod vecmath;

pub use error::GdlError;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, GdlError>;
