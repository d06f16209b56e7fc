//! Synthetic datasets: Mackey-Glass with random (α, γ, τ) and a forced Van der
//! Pol oscillator driven by an Ornstein-Uhlenbeck process with random
//! (γ, α, θ).
//!
//! Ground truth is integrated on a fine grid with a third-order
//! Adams-Bashforth scheme, downsampled, corrupted by Gaussian noise in raw
//! units and finally min-max normalised with statistics from the training
//! split.

mod dataset;
mod integrate;
mod io;
mod params;

pub use dataset::{
    downsample_and_noise, generate_dataset, normalize_dataset, Dataset, GenerateConfig,
    NormStats, NormalizedTrajectory, Split, System, Trajectory,
};
pub use integrate::{integrate_mackey_glass, integrate_vdp_ou, ou_path, Grid, VdpPath};
pub use io::{read_dataset, write_dataset, TRAJ_MAGIC};
pub use params::{sample_mg_params, sample_vdp_params, MgParams, SystemParams, VdpParams};
