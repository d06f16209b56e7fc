//! Spin-up, one-step-ahead mixture prediction and closed-loop Monte Carlo
//! forecasting.

mod io;

pub use io::{read_ensemble_csv, read_summary_csv, write_ensemble_csv, write_summary_csv};

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::nn::{GaussianPrediction, GaussianRnn, StackState};
use crate::rng::{derive_seed, stream_rng};
use crate::vi_model::{series_inputs, Segment, ViModel};
use crate::{Error, Result};

/// Sample paths per work unit. Fixed so results do not depend on how many
/// threads share the work.
const CHUNK: usize = 64;
/// Time steps per teacher-forced block in one-step prediction.
const BLOCK: usize = 128;

/// A trained model that can be rolled forward.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Vi(&'a ViModel),
    Rnn(&'a GaussianRnn),
}

impl Predictor<'_> {
    pub fn decoder(&self) -> &GaussianRnn {
        match self {
            Predictor::Vi(m) => &m.decoder,
            Predictor::Rnn(m) => m,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Predictor::Vi(m) => m.latent_dim(),
            Predictor::Rnn(_) => 0,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.decoder().output_dim()
    }

    pub fn forcing_dim(&self) -> usize {
        self.decoder().input_dim() - self.obs_dim() - self.latent_dim()
    }
}

/// Decoder state after teacher-forced spin-up over an observed history.
#[derive(Clone, Debug)]
pub struct SpinUpContext {
    pub tau: usize,
    pub state: StackState,
    /// One latent row per state row (zero columns for the baseline).
    pub z: Array2<f64>,
    /// Predictive distribution of the first point after the history.
    pub next: GaussianPrediction,
}

/// Roll the decoder from a zero state over every point of `hist`
/// (`τ + 1` points) once per latent row. Without latents a single row is used.
pub fn spin_up(model: Predictor, hist: Segment, z: Option<ArrayView2<f64>>) -> Result<SpinUpContext> {
    if hist.points() < 2 {
        return Err(Error::Usage("spin-up needs a history of at least one step".into()));
    }
    let nz = model.latent_dim();
    let z = match z {
        Some(z) if z.ncols() == nz => z.to_owned(),
        Some(z) => return Err(Error::shape("latent width", nz, z.ncols())),
        None if nz == 0 => Array2::zeros((1, 0)),
        None => return Err(Error::Usage("a latent sample is required for this model".into())),
    };
    let rows = z.nrows();
    let dec = model.decoder();
    let xs = series_inputs(&[hist], hist.points(), rows, (nz > 0).then(|| z.view()))?;
    let (out, state) = dec.predict_sequence(xs.view(), &dec.initial_state(rows))?;
    let last = out.mu.nrows() - rows;
    let next = GaussianPrediction {
        mu: out.mu.slice(s![last.., ..]).to_owned(),
        log_sigma: out.log_sigma.slice(s![last.., ..]).to_owned(),
    };
    Ok(SpinUpContext { tau: hist.points() - 1, state, z, next })
}

/// Moments of an equally weighted Gaussian mixture, one component per row.
pub fn mixture_moments(mu: ArrayView2<f64>, sigma: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let m = mu.nrows() as f64;
    let mean = mu.sum_axis(Axis(0)) / m;
    let second = (mu.mapv(|v| v * v) + sigma.mapv(|v| v * v)).sum_axis(Axis(0)) / m;
    let var = (second - mean.mapv(|v| v * v)).mapv(|v| v.max(0.0));
    (mean, var.mapv(f64::sqrt))
}

/// One-step-ahead predictive mixture for points `start..` of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct OneStep {
    /// Index of the first predicted point.
    pub start: usize,
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
}

fn draw_latents(model: &ViModel, hist: Segment, n: usize, seed: u64) -> Result<Array2<f64>> {
    let q = model.posterior(&[hist])?;
    let nz = model.latent_dim();
    let mut z = Array2::zeros((n, nz));
    for j in 0..n {
        let mut rng = stream_rng(seed, j as u64);
        for i in 0..nz {
            let e: f64 = rng.sample(StandardNormal);
            z[[j, i]] = q.mean[[0, i]] + q.log_sigma[[0, i]].exp() * e;
        }
    }
    Ok(z)
}

/// Condition `q` on points `0..=tau` of `traj`, then run `m` teacher-forced
/// decoders from a zero state over the whole trajectory and mix their
/// predictions for points `tau + 1..`. The baseline uses a single component.
pub fn one_step_predict(model: Predictor, traj: Segment, tau: usize, m: usize, seed: u64) -> Result<OneStep> {
    let n = traj.points();
    if tau == 0 || tau + 1 >= n {
        return Err(Error::Usage(format!("history of {tau} steps does not fit a trajectory of {n} points")));
    }
    if m == 0 {
        return Err(Error::Usage("at least one mixture component is required".into()));
    }
    let z = match model {
        Predictor::Vi(vi) if vi.latent_dim() > 0 => draw_latents(vi, traj.slice(0, tau + 1), m, seed)?,
        _ => Array2::zeros((1, 0)),
    };
    let rows = z.nrows();
    let dec = model.decoder();
    let d = dec.output_dim();
    let steps = n - 1;
    let mut state = dec.initial_state(rows);
    let mut mu = Array2::zeros((n - tau - 1, d));
    let mut sigma = Array2::zeros((n - tau - 1, d));
    let mut t0 = 0;
    while t0 < steps {
        let t1 = (t0 + BLOCK).min(steps);
        let seg = traj.slice(t0, t1);
        let xs = series_inputs(&[seg], t1 - t0, rows, (z.ncols() > 0).then(|| z.view()))?;
        let (out, next) = dec.predict_sequence(xs.view(), &state)?;
        state = next;
        let sig = out.sigma();
        for t in t0..t1 {
            // Input at t predicts point t + 1.
            if t + 1 <= tau {
                continue;
            }
            let r = (t - t0) * rows;
            let (mm, ss) = mixture_moments(out.mu.slice(s![r..r + rows, ..]), sig.slice(s![r..r + rows, ..]));
            mu.row_mut(t - tau).assign(&mm);
            sigma.row_mut(t - tau).assign(&ss);
        }
        t0 = t1;
    }
    Ok(OneStep { start: tau + 1, mu, sigma })
}

/// Closed-loop sample paths. Arrays are indexed `[sample, step, dim]`; step
/// `k` is the `(k + 1)`-th point after the forecast origin.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastEnsemble {
    pub seed: u64,
    pub y: Array3<f64>,
    pub mu: Array3<f64>,
    pub sigma: Array3<f64>,
}

impl ForecastEnsemble {
    pub fn n_samples(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn obs_dim(&self) -> usize {
        self.y.shape()[2]
    }

    fn truncated(&self, steps: usize) -> Self {
        ForecastEnsemble {
            seed: self.seed,
            y: self.y.slice(s![.., ..steps, ..]).to_owned(),
            mu: self.mu.slice(s![.., ..steps, ..]).to_owned(),
            sigma: self.sigma.slice(s![.., ..steps, ..]).to_owned(),
        }
    }
}

/// A model that can be stepped in closed loop: one input row per sample path.
pub trait ClosedLoop {
    type State;
    fn obs_dim(&self) -> usize;
    fn step(&self, x: ArrayView2<f64>, state: &mut Self::State) -> Result<GaussianPrediction>;
}

impl ClosedLoop for GaussianRnn {
    type State = StackState;

    fn obs_dim(&self) -> usize {
        self.output_dim()
    }

    fn step(&self, x: ArrayView2<f64>, state: &mut StackState) -> Result<GaussianPrediction> {
        GaussianRnn::step(self, x, state)
    }
}

/// Sample paths produced by [`closed_loop`]; `diverged` names the first
/// step (0-based) and sample at which a draw was not finite.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub y: Array3<f64>,
    pub mu: Array3<f64>,
    pub sigma: Array3<f64>,
    pub diverged: Option<(usize, usize)>,
}

/// Closed-loop sampling: draw `y = μ + σ ε` from `first`, feed `[y, u, z]`
/// back, repeat for `horizon` points. Row `r` uses `rngs[r]` and latent row
/// `z[r]`; `u_future` row `k` is the forcing at the `(k + 1)`-th point.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop<M: ClosedLoop, R: Rng>(
    model: &M,
    mut state: M::State,
    first: GaussianPrediction,
    z: ArrayView2<f64>,
    u_future: ArrayView2<f64>,
    horizon: usize,
    rngs: &mut [R],
    first_sample: usize,
) -> Result<Rollout> {
    let count = rngs.len();
    let d = model.obs_dim();
    let nu = u_future.ncols();
    let nz = z.ncols();
    let mut pred = first;
    let mut y = Array3::zeros((count, horizon, d));
    let mut mu = Array3::zeros((count, horizon, d));
    let mut sigma = Array3::zeros((count, horizon, d));
    let mut x = Array2::zeros((count, d + nu + nz));
    x.slice_mut(s![.., d + nu..]).assign(&z);
    for k in 0..horizon {
        for (r, rng) in rngs.iter_mut().enumerate() {
            for i in 0..d {
                let m = pred.mu[[r, i]];
                let sd = pred.log_sigma[[r, i]].exp();
                let e: f64 = rng.sample(StandardNormal);
                let v = m + sd * e;
                if !v.is_finite() {
                    return Ok(Rollout { y, mu, sigma, diverged: Some((k, first_sample + r)) });
                }
                y[[r, k, i]] = v;
                mu[[r, k, i]] = m;
                sigma[[r, k, i]] = sd;
                x[[r, i]] = v;
            }
        }
        if k + 1 == horizon {
            break;
        }
        for r in 0..count {
            x.slice_mut(s![r, d..d + nu]).assign(&u_future.row(k));
        }
        pred = model.step(x.view(), &mut state)?;
    }
    Ok(Rollout { y, mu, sigma, diverged: None })
}

fn broadcast_rows(a: &Array2<f64>, rows: usize) -> Array2<f64> {
    a.broadcast((rows, a.ncols())).expect("single row").to_owned()
}

#[allow(clippy::too_many_arguments)]
fn run_chunk(
    model: Predictor,
    hist: Segment,
    u_future: ArrayView2<f64>,
    q: Option<&crate::vi_model::PosteriorBatch>,
    base: Option<&SpinUpContext>,
    first: usize,
    count: usize,
    horizon: usize,
    seed: u64,
) -> Result<Rollout> {
    let nz = model.latent_dim();
    let mut rngs: Vec<_> = (first..first + count).map(|j| stream_rng(seed, j as u64)).collect();
    let mut z = Array2::zeros((count, nz));
    if let Some(q) = q {
        for (r, rng) in rngs.iter_mut().enumerate() {
            for i in 0..nz {
                let e: f64 = rng.sample(StandardNormal);
                z[[r, i]] = q.mean[[0, i]] + q.log_sigma[[0, i]].exp() * e;
            }
        }
    }
    let ctx = match base {
        Some(b) => SpinUpContext {
            tau: b.tau,
            state: StackState { h1: broadcast_rows(&b.state.h1, count), h2: broadcast_rows(&b.state.h2, count) },
            z: Array2::zeros((count, 0)),
            next: GaussianPrediction {
                mu: broadcast_rows(&b.next.mu, count),
                log_sigma: broadcast_rows(&b.next.log_sigma, count),
            },
        },
        None => spin_up(model, hist, Some(z.view()))?,
    };
    closed_loop(model.decoder(), ctx.state, ctx.next, ctx.z.view(), u_future, horizon, &mut rngs, first)
}

/// Monte Carlo forecast from the last point of `hist` (Algorithm: posterior
/// from the encoder over the history, one latent draw per path, teacher-forced
/// spin-up, then closed-loop sampling). `u_future` holds the forcing at the
/// first `horizon - 1` points after the origin. Sample path `j` draws all its
/// randomness from stream `j` of `seed`.
pub fn mc_forecast(
    model: Predictor,
    hist: Segment,
    u_future: ArrayView2<f64>,
    n_samples: usize,
    horizon: usize,
    seed: u64,
) -> Result<ForecastEnsemble> {
    if n_samples == 0 || horizon == 0 {
        return Err(Error::Usage("forecast needs at least one sample and one step".into()));
    }
    let nu = model.forcing_dim();
    if u_future.ncols() != nu {
        return Err(Error::shape("forcing width", nu, u_future.ncols()));
    }
    if nu > 0 && u_future.nrows() + 1 < horizon {
        return Err(Error::Usage(format!(
            "forcing covers {} steps but the horizon needs {}",
            u_future.nrows() + 1,
            horizon
        )));
    }
    if hist.points() < 2 {
        return Err(Error::Usage("spin-up needs a history of at least one step".into()));
    }
    let u_future = if nu == 0 { Array2::zeros((horizon, 0)) } else { u_future.to_owned() };
    let (q, base) = match model {
        Predictor::Vi(vi) if vi.latent_dim() > 0 => (Some(vi.posterior(&[hist])?), None),
        _ => (None, Some(spin_up(model, hist, Some(Array2::zeros((1, 0)).view()))?)),
    };
    let chunks: Vec<(usize, usize)> =
        (0..n_samples).step_by(CHUNK).map(|f| (f, CHUNK.min(n_samples - f))).collect();
    let runs: Vec<(usize, Rollout)> = chunks
        .par_iter()
        .map(|&(first, count)| {
            run_chunk(model, hist, u_future.view(), q.as_ref(), base.as_ref(), first, count, horizon, seed)
                .map(|r| (first, r))
        })
        .collect::<Result<_>>()?;
    let d = model.obs_dim();
    let mut ens = ForecastEnsemble {
        seed,
        y: Array3::zeros((n_samples, horizon, d)),
        mu: Array3::zeros((n_samples, horizon, d)),
        sigma: Array3::zeros((n_samples, horizon, d)),
    };
    let mut diverged: Option<(usize, usize)> = None;
    for (first, run) in runs {
        let rows = s![first..first + run.y.shape()[0], .., ..];
        ens.y.slice_mut(rows).assign(&run.y);
        ens.mu.slice_mut(rows).assign(&run.mu);
        ens.sigma.slice_mut(rows).assign(&run.sigma);
        if let Some((k, j)) = run.diverged {
            if diverged.is_none_or(|(k0, _)| k < k0) {
                diverged = Some((k, j));
            }
        }
    }
    if let Some((step, sample)) = diverged {
        return Err(Error::ForecastDiverged { step: step + 1, sample, partial: Box::new(ens.truncated(step)) });
    }
    Ok(ens)
}

/// Inverse empirical CDF: the `⌈pN⌉`-th smallest value of `sorted`.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Central interval at level `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub p: f64,
    pub lo: Array2<f64>,
    pub hi: Array2<f64>,
}

/// Per-step ensemble statistics, arrays `[step, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSummary {
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
    pub q025: Array2<f64>,
    pub q975: Array2<f64>,
    pub bands: Vec<Band>,
}

/// Sample mean, standard deviation and empirical quantiles at each step.
pub fn summarize(ens: &ForecastEnsemble, levels: &[f64]) -> ForecastSummary {
    let (n, h, d) = (ens.n_samples(), ens.horizon(), ens.obs_dim());
    let mut mean = Array2::zeros((h, d));
    let mut std = Array2::zeros((h, d));
    let mut q025 = Array2::zeros((h, d));
    let mut q975 = Array2::zeros((h, d));
    let mut bands: Vec<Band> = levels
        .iter()
        .map(|&p| Band { p, lo: Array2::zeros((h, d)), hi: Array2::zeros((h, d)) })
        .collect();
    let mut col = vec![0.0; n];
    for k in 0..h {
        for i in 0..d {
            for (j, c) in col.iter_mut().enumerate() {
                *c = ens.y[[j, k, i]];
            }
            let m = col.iter().sum::<f64>() / n as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            mean[[k, i]] = m;
            std[[k, i]] = v.sqrt();
            col.sort_by(f64::total_cmp);
            q025[[k, i]] = empirical_quantile(&col, 0.025);
            q975[[k, i]] = empirical_quantile(&col, 0.975);
            for b in &mut bands {
                b.lo[[k, i]] = empirical_quantile(&col, (1.0 - b.p) / 2.0);
                b.hi[[k, i]] = empirical_quantile(&col, (1.0 + b.p) / 2.0);
            }
        }
    }
    ForecastSummary { mean, std, q025, q975, bands }
}

/// Seed for the forecast of trajectory `traj` from origin `start`.
pub fn forecast_seed(seed: u64, traj: usize, start: usize) -> u64 {
    derive_seed(seed, &format!("forecast/{traj}/{start}"))
}
