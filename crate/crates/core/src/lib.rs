//! Variational-inference recurrent networks for simulating dynamical systems
//! whose physical parameters are unknown and vary between trajectories.
//!
//! The crate is organised bottom-up:
//!
//! * [`dyngen`] generates the synthetic Mackey-Glass and forced Van der Pol
//!   datasets and handles normalisation and persistence.
//! * [`nn`] holds the hand-differentiated building blocks (affine layers,
//!   two-level GRU stack, Gaussian heads) with batched BPTT.
//! * [`optim`] is ADAM with a cosine learning-rate schedule.
//! * [`vi_model`] wires encoder, posterior network and decoder together and
//!   trains them.
//! * [`simulate`] runs one-step mixture predictions and closed-loop Monte
//!   Carlo forecasts.
//! * [`eval`] computes the forecast metrics and the latent-space analysis.

pub mod dyngen;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod simulate;
pub mod vi_model;

pub use error::{Error, Result};
