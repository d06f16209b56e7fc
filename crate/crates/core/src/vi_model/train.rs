use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{rnn_objective, vi_objective, Segment, TrainConfig, ViGrad, ViLoss, ViModel};
use crate::dyngen::Dataset;
use crate::nn::{assign_flat, flatten, GaussianRnn};
use crate::optim::{cosine_lr, AdamState};
use crate::rng::{derive_seed, stream_rng};
use crate::{Error, Result};

/// A training window: trajectory index and first point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_q: f64,
    pub l_y: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Parameters with the lowest validation loss.
    pub model: M,
    pub log: Vec<LogRow>,
    pub best_iteration: usize,
    pub best_val_loss: f64,
}

/// Draw `count` windows of `points` points: trajectories uniformly with
/// replacement from `pool`, then a uniform start offset.
pub fn sample_windows<R: Rng + ?Sized>(
    rng: &mut R,
    pool: &[usize],
    traj_points: usize,
    points: usize,
    count: usize,
) -> Result<Vec<Window>> {
    if pool.is_empty() {
        return Err(Error::Usage("no trajectories to sample windows from".into()));
    }
    if points > traj_points {
        return Err(Error::Range(format!(
            "window of {points} points does not fit trajectories of {traj_points} points"
        )));
    }
    let slack = traj_points - points;
    Ok((0..count)
        .map(|_| {
            let traj = pool[rng.random_range(0..pool.len())];
            let start = rng.random_range(0..=slack);
            Window { traj, start }
        })
        .collect())
}

/// Fixed validation windows. They depend only on the dataset seed and the
/// window geometry, so every model trained on a dataset sees the same ones.
/// Falls back to the training split when the validation split is empty.
pub fn validation_windows(ds: &Dataset, points: usize, count: usize) -> Result<Vec<Window>> {
    let pool = if ds.split.val.is_empty() { &ds.split.train } else { &ds.split.val };
    let mut rng = stream_rng(derive_seed(ds.seed, "validation-windows"), 0);
    sample_windows(&mut rng, pool, ds.steps() + 1, points, count)
}

pub fn segments<'a>(ds: &'a Dataset, windows: &[Window], points: usize) -> Vec<Segment<'a>> {
    windows
        .iter()
        .map(|w| {
            let n = ds.normalized(w.traj);
            Segment { y: n.y.view(), u: n.u.view() }.slice(w.start, w.start + points)
        })
        .collect()
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// ADAM over a flat parameter vector with cosine decay, periodic validation
/// and best-validation retention.
fn optimise<F, V>(
    theta: &mut Vec<f64>,
    cfg: &TrainConfig,
    rng: &mut crate::rng::Rng,
    mut batch: F,
    mut validate: V,
) -> Result<(Vec<f64>, Vec<LogRow>, usize, f64)>
where
    F: FnMut(&[f64], &mut crate::rng::Rng) -> Result<(ViLoss, Vec<f64>)>,
    V: FnMut(&[f64]) -> Result<f64>,
{
    let sched = cfg.schedule();
    let mut adam = AdamState::new(theta.len(), cfg.clip);
    let mut log = Vec::new();
    let mut best = (theta.clone(), 0, f64::INFINITY);
    for l in 0..cfg.iterations {
        let iter = l + 1;
        let lr = cosine_lr(l, &sched)?;
        let (parts, grad) = batch(theta, rng)?;
        if !parts.loss.is_finite() {
            return Err(Error::TrainingFailure { iteration: iter, reason: format!("loss is {}", parts.loss) });
        }
        adam.step(theta, &grad, lr).map_err(|e| match e {
            Error::PoisonedGradient { index } => Error::TrainingFailure {
                iteration: iter,
                reason: format!("non-finite gradient at flat index {index}"),
            },
            other => other,
        })?;
        let mut val_loss = None;
        if iter % cfg.val_every == 0 || iter == cfg.iterations {
            let v = validate(theta)?;
            if !v.is_finite() {
                return Err(Error::TrainingFailure { iteration: iter, reason: format!("validation loss is {v}") });
            }
            if v < best.2 {
                best = (theta.clone(), iter, v);
            }
            val_loss = Some(v);
        }
        if iter % cfg.log_every == 0 || val_loss.is_some() {
            log.push(LogRow { iter, lr, loss: parts.loss, l_q: parts.kl, l_y: parts.recon, val_loss });
        }
    }
    Ok((best.0, log, best.1, best.2))
}

/// Train a plain recurrent Gaussian predictor over `y‖u` by one-step NLL.
/// Used both for encoder pretraining and for the baseline model.
pub fn train_rnn(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<GaussianRnn>> {
    cfg.validate()?;
    let points = cfg.seq_len + 1;
    let val = validation_windows(ds, points, cfg.val_windows)?;
    let mut net = GaussianRnn::init(
        ds.obs_dim() + ds.forcing_dim(),
        cfg.hidden,
        ds.obs_dim(),
        &mut stream_rng(cfg.seed, 0),
    );
    let mut theta = flatten(&net);
    let mut rng = stream_rng(cfg.seed, 1);
    let mut scratch = net.clone();
    let (best, log, best_iteration, best_val_loss) = optimise(
        &mut theta,
        cfg,
        &mut rng,
        |theta, rng| {
            assign_flat(&mut scratch, theta)?;
            let windows = sample_windows(rng, &ds.split.train, ds.steps() + 1, points, cfg.batch)?;
            let segs = segments(ds, &windows, points);
            let mut grad = scratch.zeros_like();
            let loss = rnn_objective(&scratch, &segs, Some(&mut grad))?;
            Ok((ViLoss { loss, kl: 0.0, recon: loss }, flatten(&grad)))
        },
        |theta| {
            let mut m = net.clone();
            assign_flat(&mut m, theta)?;
            rnn_objective(&m, &segments(ds, &val, points), None)
        },
    )?;
    assign_flat(&mut net, &best)?;
    Ok(TrainOutcome { model: net, log, best_iteration, best_val_loss })
}

fn vi_flat(m: &ViModel) -> Vec<f64> {
    let mut v = flatten(&m.posterior);
    v.extend(flatten(&m.decoder));
    v
}

fn vi_assign(m: &mut ViModel, theta: &[f64]) -> Result<()> {
    let n = crate::nn::num_params(&m.posterior);
    assign_flat(&mut m.posterior, &theta[..n.min(theta.len())])?;
    assign_flat(&mut m.decoder, &theta[n.min(theta.len())..])
}

/// Train the posterior network and decoder against a frozen encoder.
pub fn train_vi(ds: &Dataset, encoder: &GaussianRnn, cfg: &TrainConfig) -> Result<TrainOutcome<ViModel>> {
    cfg.validate()?;
    if encoder.input_dim() != ds.obs_dim() + ds.forcing_dim() || encoder.output_dim() != ds.obs_dim() {
        return Err(Error::shape("encoder input", ds.obs_dim() + ds.forcing_dim(), encoder.input_dim()));
    }
    let points = cfg.seq_len + 1;
    let nz = cfg.latent_dim;
    let val = validation_windows(ds, points, cfg.val_windows)?;
    let val_eps = standard_normal(
        &mut stream_rng(derive_seed(ds.seed, "validation-noise"), 0),
        val.len() * cfg.samples,
        nz,
    );
    let mut model = ViModel::init(encoder.clone(), cfg.hidden, nz, cfg.sigma_z, &mut stream_rng(cfg.seed, 0));
    let mut theta = vi_flat(&model);
    let mut rng = stream_rng(cfg.seed, 1);
    let mut scratch = model.clone();
    let (best, log, best_iteration, best_val_loss) = optimise(
        &mut theta,
        cfg,
        &mut rng,
        |theta, rng| {
            vi_assign(&mut scratch, theta)?;
            let windows = sample_windows(rng, &ds.split.train, ds.steps() + 1, points, cfg.batch)?;
            let segs = segments(ds, &windows, points);
            let eps = standard_normal(rng, cfg.batch * cfg.samples, nz);
            let mut grad = ViGrad::zeros_for(&scratch);
            let parts = vi_objective(&scratch, &segs, cfg.lambda, eps.view(), cfg.samples, Some(&mut grad))?;
            let mut g = flatten(&grad.posterior);
            g.extend(flatten(&grad.decoder));
            Ok((parts, g))
        },
        |theta| {
            let mut m = model.clone();
            vi_assign(&mut m, theta)?;
            let segs = segments(ds, &val, points);
            Ok(vi_objective(&m, &segs, cfg.lambda, val_eps.view(), cfg.samples, None)?.loss)
        },
    )?;
    vi_assign(&mut model, &best)?;
    Ok(TrainOutcome { model, log, best_iteration, best_val_loss })
}
