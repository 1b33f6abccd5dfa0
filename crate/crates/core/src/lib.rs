//! Streaming foreground extraction for video SAR.
//!
//! The background of a registered frame sequence is modelled as a low-rank
//! product `U Vᵀ` whose residual follows a zero-mean Gaussian mixture. The
//! mixture and the basis are learned online, frame by frame, and the stacked
//! residuals are cleaned with a nuclear-norm / L1 decomposition so that moving
//! shadows stand out against a suppressed background.
//!
//! Module map:
//!
//! * [`videodata`]: frames, the column-stacked [`videodata::VideoMatrix`], PGM and
//!   `SBFV1` matrix I/O.
//! * [`registration`]: rigid phase-correlation alignment.
//! * [`gmd`]: mixture E-step, batch and online M-steps, weights, likelihood.
//! * [`subspace`]: PCA init, weighted coefficient solves, recursive row updates,
//!   batch weighted ALS.
//! * [`admm`]: proximal operators and the two/three-term convex decompositions.
//! * [`pipeline`]: the streaming driver and output rendering.
//! * [`detect`], [`metrics`]: the threshold detector and evaluation metrics.
//! * [`synth`]: seeded synthetic scenes with planted ground truth.
//! * [`cli`]: the `sebsfv` command line.

pub mod admm;
pub mod cli;
pub mod detect;
pub mod error;
pub mod gmd;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod registration;
pub mod subspace;
pub mod synth;
pub mod videodata;

pub use error::{Error, Result};
