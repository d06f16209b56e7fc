use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::integrate::{integrate_mackey_glass, integrate_vdp_ou, Grid};
use super::params::{sample_mg_params, sample_vdp_params, SystemParams};
use crate::rng::stream_rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    MackeyGlass,
    Vdp,
}

impl System {
    /// Observed dimension `d`.
    pub fn obs_dim(self) -> usize {
        1
    }

    /// Forcing dimension `N_u`.
    pub fn forcing_dim(self) -> usize {
        match self {
            System::MackeyGlass => 0,
            System::Vdp => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            System::MackeyGlass => "mackey_glass",
            System::Vdp => "vdp",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "mackey_glass" | "mackey-glass" | "mg" => Some(System::MackeyGlass),
            "vdp" | "van-der-pol" => Some(System::Vdp),
            _ => None,
        }
    }
}

/// One trajectory in raw (unnormalised) units. Rows are time, columns are
/// dimensions; `u` has zero columns when the system is unforced.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub y: Array2<f64>,
    pub u: Array2<f64>,
    pub phi: Array2<f64>,
    pub params: SystemParams,
    pub dt_sample: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }
}

/// Take every `stride`-th fine point and add i.i.d. `N(0, σ_ε²)` noise to
/// the observation only.
pub fn downsample_and_noise<R: Rng + ?Sized>(
    phi: &Array2<f64>,
    u: &Array2<f64>,
    stride: usize,
    sigma_eps: f64,
    dt_fine: f64,
    params: SystemParams,
    rng: &mut R,
) -> Result<Trajectory> {
    if stride == 0 {
        return Err(Error::Range("stride must be at least 1".into()));
    }
    if !(sigma_eps >= 0.0) {
        return Err(Error::Range(format!("noise sigma must be >= 0, got {sigma_eps}")));
    }
    let rows: Vec<usize> = (0..phi.nrows()).step_by(stride).collect();
    let phi_s = phi.select(Axis(0), &rows);
    let u_s = if u.ncols() == 0 {
        Array2::zeros((rows.len(), 0))
    } else {
        u.select(Axis(0), &rows)
    };
    let mut y = phi_s.clone();
    if sigma_eps > 0.0 {
        let noise = Normal::new(0.0, sigma_eps).expect("finite sigma");
        y.mapv_inplace(|v| v + noise.sample(rng));
    }
    Ok(Trajectory { y, u: u_s, phi: phi_s, params, dt_sample: dt_fine * stride as f64 })
}

/// Per-dimension `(min, max)` of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub y: Vec<(f64, f64)>,
    pub u: Vec<(f64, f64)>,
}

fn scale(v: f64, (lo, hi): (f64, f64)) -> f64 {
    (v - lo) / (hi - lo) - 0.5
}

fn unscale(v: f64, (lo, hi): (f64, f64)) -> f64 {
    (v + 0.5) * (hi - lo) + lo
}

impl NormStats {
    pub fn normalize_y(&self, a: &Array2<f64>) -> Array2<f64> {
        map_columns(a, &self.y, scale)
    }

    pub fn denormalize_y(&self, a: &Array2<f64>) -> Array2<f64> {
        map_columns(a, &self.y, unscale)
    }

    pub fn normalize_u(&self, a: &Array2<f64>) -> Array2<f64> {
        map_columns(a, &self.u, scale)
    }

    /// Raw-unit noise level expressed in normalised units of dimension `dim`.
    pub fn sigma_normalized(&self, sigma_raw: f64, dim: usize) -> f64 {
        let (lo, hi) = self.y[dim];
        sigma_raw / (hi - lo)
    }
}

fn map_columns(a: &Array2<f64>, stats: &[(f64, f64)], f: fn(f64, (f64, f64)) -> f64) -> Array2<f64> {
    let mut out = a.clone();
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| f(v, stats[j]));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Normalised copy of a trajectory, as seen by the models.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedTrajectory {
    pub y: Array2<f64>,
    pub u: Array2<f64>,
    pub phi: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub system: System,
    pub trajectories: Vec<Trajectory>,
    pub norm_stats: NormStats,
    pub split: Split,
    pub seed: u64,
    pub noise_sigma: f64,
    pub dt_fine: f64,
    pub stride: usize,
    normalized: Vec<NormalizedTrajectory>,
}

impl Dataset {
    pub fn normalized(&self, k: usize) -> &NormalizedTrajectory {
        &self.normalized[k]
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Number of steps per trajectory (`T`; each has `T + 1` points).
    pub fn steps(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.len().saturating_sub(1))
    }

    pub fn obs_dim(&self) -> usize {
        self.system.obs_dim()
    }

    pub fn forcing_dim(&self) -> usize {
        self.system.forcing_dim()
    }

    /// Observation noise in normalised units, per observed dimension.
    pub fn noise_sigma_normalized(&self) -> Vec<f64> {
        (0..self.obs_dim())
            .map(|i| self.norm_stats.sigma_normalized(self.noise_sigma, i))
            .collect()
    }
}

fn column_ranges<'a>(arrays: impl Iterator<Item = &'a Array2<f64>>, ncols: usize) -> Vec<(f64, f64)> {
    let mut r = vec![(f64::INFINITY, f64::NEG_INFINITY); ncols];
    for a in arrays {
        for (j, col) in a.columns().into_iter().enumerate() {
            for &v in col {
                r[j].0 = r[j].0.min(v);
                r[j].1 = r[j].1.max(v);
            }
        }
    }
    r
}

/// Compute min-max statistics on the first `train_count` trajectories and
/// attach the normalised copies. The remaining trajectories form the
/// validation split.
#[allow(clippy::too_many_arguments)]
pub fn normalize_dataset(
    system: System,
    trajectories: Vec<Trajectory>,
    train_count: usize,
    seed: u64,
    noise_sigma: f64,
    dt_fine: f64,
    stride: usize,
) -> Result<Dataset> {
    if train_count == 0 || train_count > trajectories.len() {
        return Err(Error::Range(format!(
            "train count {train_count} outside 1..={}",
            trajectories.len()
        )));
    }
    let train = &trajectories[..train_count];
    let y = column_ranges(train.iter().map(|t| &t.y), system.obs_dim());
    let u = column_ranges(train.iter().map(|t| &t.u), system.forcing_dim());
    for (dim, &(lo, hi)) in y.iter().chain(u.iter()).enumerate() {
        if !(hi > lo) {
            return Err(Error::DegenerateDimension { dim });
        }
    }
    let norm_stats = NormStats { y, u };
    let normalized = trajectories
        .iter()
        .map(|t| NormalizedTrajectory {
            y: norm_stats.normalize_y(&t.y),
            u: norm_stats.normalize_u(&t.u),
            phi: norm_stats.normalize_y(&t.phi),
        })
        .collect();
    let split = Split {
        train: (0..train_count).collect(),
        val: (train_count..trajectories.len()).collect(),
    };
    Ok(Dataset {
        system,
        trajectories,
        norm_stats,
        split,
        seed,
        noise_sigma,
        dt_fine,
        stride,
        normalized,
    })
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub system: System,
    pub k: usize,
    pub t: usize,
    pub train_count: usize,
    pub seed: u64,
    pub dt_fine: f64,
    pub stride: usize,
    pub sigma_eps: f64,
    /// Discarded prefix, in time units.
    pub burn_in: f64,
}

/// Constant initial history of the Mackey-Glass delay equation.
pub const MG_HISTORY: f64 = 1.2;
/// Van der Pol initial (position, velocity).
pub const VDP_INITIAL: [f64; 2] = [0.1, 0.0];

impl GenerateConfig {
    pub fn mackey_glass() -> Self {
        GenerateConfig {
            system: System::MackeyGlass,
            k: 500,
            t: 1000,
            train_count: 400,
            seed: 0,
            dt_fine: 0.01,
            stride: 100,
            sigma_eps: 0.03,
            burn_in: 300.0,
        }
    }

    pub fn vdp() -> Self {
        GenerateConfig {
            system: System::Vdp,
            k: 500,
            t: 1000,
            train_count: 400,
            seed: 0,
            dt_fine: 0.001,
            stride: 200,
            sigma_eps: 0.075,
            burn_in: 50.0,
        }
    }

    pub fn for_system(system: System) -> Self {
        match system {
            System::MackeyGlass => Self::mackey_glass(),
            System::Vdp => Self::vdp(),
        }
    }

    fn grid(&self) -> Grid {
        Grid {
            dt: self.dt_fine,
            n_steps: self.t * self.stride,
            burn_in_steps: (self.burn_in / self.dt_fine).round() as usize,
        }
    }
}

fn column(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column shape")
}

/// Generate trajectory `k` of `cfg`. Each trajectory draws from its own
/// stream, so the result does not depend on generation order.
pub fn generate_trajectory(cfg: &GenerateConfig, k: usize) -> Result<Trajectory> {
    let mut rng = stream_rng(cfg.seed, k as u64);
    let grid = cfg.grid();
    match cfg.system {
        System::MackeyGlass => {
            let p = sample_mg_params(&mut rng);
            let phi = integrate_mackey_glass(&p, &grid, |_| MG_HISTORY)?;
            downsample_and_noise(
                &column(phi),
                &Array2::zeros((0, 0)),
                cfg.stride,
                cfg.sigma_eps,
                cfg.dt_fine,
                SystemParams::MackeyGlass(p),
                &mut rng,
            )
        }
        System::Vdp => {
            let p = sample_vdp_params(&mut rng);
            let path = integrate_vdp_ou(&p, &grid, VDP_INITIAL, &mut rng)?;
            downsample_and_noise(
                &column(path.position),
                &column(path.forcing),
                cfg.stride,
                cfg.sigma_eps,
                cfg.dt_fine,
                SystemParams::Vdp(p),
                &mut rng,
            )
        }
    }
}

pub fn generate_dataset(cfg: &GenerateConfig) -> Result<Dataset> {
    let trajectories = (0..cfg.k)
        .into_par_iter()
        .map(|k| generate_trajectory(cfg, k))
        .collect::<Result<Vec<_>>>()?;
    normalize_dataset(
        cfg.system,
        trajectories,
        cfg.train_count,
        cfg.seed,
        cfg.sigma_eps,
        cfg.dt_fine,
        cfg.stride,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyngen::params::MgParams;
    use ndarray::array;

    fn mg() -> SystemParams {
        SystemParams::MackeyGlass(MgParams { alpha: 0.3, gamma: 0.07, tau: 30.0 })
    }

    fn traj(y: Array2<f64>) -> Trajectory {
        Trajectory { phi: y.clone(), u: Array2::zeros((y.nrows(), 0)), y, params: mg(), dt_sample: 1.0 }
    }

    #[test]
    fn zero_noise_keeps_truth() {
        let phi = column((0..1001).map(|i| (i as f64 * 0.01).sin()).collect());
        let t = downsample_and_noise(&phi, &Array2::zeros((0, 0)), 100, 0.0, 0.01, mg(), &mut stream_rng(0, 0))
            .unwrap();
        assert_eq!(t.len(), 11);
        assert_eq!(t.y, t.phi);
        assert_eq!(t.phi[[3, 0]], phi[[300, 0]]);
        assert!((t.dt_sample - 1.0).abs() < 1e-15);
    }

    #[test]
    fn noise_is_white() {
        let phi = column(vec![0.0; 100_001]);
        let t = downsample_and_noise(&phi, &Array2::zeros((0, 0)), 1, 0.5, 1.0, mg(), &mut stream_rng(9, 0))
            .unwrap();
        let e: Vec<f64> = t.y.column(0).iter().copied().collect();
        let n = e.len() as f64;
        let var = e.iter().map(|x| x * x).sum::<f64>() / n;
        let lag1 = e.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (n - 1.0) / var;
        assert!(lag1.abs() < 3.0 / n.sqrt(), "lag-1 autocorrelation {lag1}");
        assert!((var.sqrt() - 0.5).abs() < 0.01);
    }

    #[test]
    fn forcing_is_never_noised() {
        let phi = column(vec![0.0; 11]);
        let u = column((0..11).map(f64::from).collect());
        let t = downsample_and_noise(&phi, &u, 1, 1.0, 1.0, mg(), &mut stream_rng(1, 0)).unwrap();
        assert_eq!(t.u, u);
    }

    #[test]
    fn constant_series_is_degenerate() {
        let t = traj(Array2::from_elem((5, 1), 2.0));
        let err = normalize_dataset(System::MackeyGlass, vec![t], 1, 0, 0.0, 0.01, 1).unwrap_err();
        assert!(matches!(err, Error::DegenerateDimension { dim: 0 }));
    }

    #[test]
    fn endpoints_map_to_half() {
        let t = traj(array![[1.0], [3.0], [2.0]]);
        let ds = normalize_dataset(System::MackeyGlass, vec![t], 1, 0, 0.0, 0.01, 1).unwrap();
        let y = &ds.normalized(0).y;
        assert_eq!(y[[0, 0]], -0.5);
        assert_eq!(y[[1, 0]], 0.5);
        assert_eq!(y[[2, 0]], 0.0);
    }

    #[test]
    fn split_is_prefix_and_suffix() {
        let ts: Vec<_> = (0..5).map(|i| traj(array![[0.0], [1.0 + i as f64]])).collect();
        let ds = normalize_dataset(System::MackeyGlass, ts, 4, 0, 0.0, 0.01, 1).unwrap();
        assert_eq!(ds.split.train, vec![0, 1, 2, 3]);
        assert_eq!(ds.split.val, vec![4]);
        // statistics from the training split only
        assert_eq!(ds.norm_stats.y[0], (0.0, 4.0));
    }
}
