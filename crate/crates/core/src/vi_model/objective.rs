use ndarray::{s, Array2, ArrayView2};

use super::{kl_terms, PosteriorNet, ViModel};
use crate::nn::{gaussian_nll, GaussianRnn};
use crate::{Error, Result};

/// A contiguous stretch of one trajectory: observations and forcing, one row
/// per point.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    pub y: ArrayView2<'a, f64>,
    pub u: ArrayView2<'a, f64>,
}

impl<'a> Segment<'a> {
    pub fn new(y: ArrayView2<'a, f64>, u: ArrayView2<'a, f64>) -> Result<Self> {
        if y.nrows() != u.nrows() {
            return Err(Error::shape("forcing rows", y.nrows(), u.nrows()));
        }
        Ok(Segment { y, u })
    }

    pub fn points(&self) -> usize {
        self.y.nrows()
    }

    pub fn slice(&self, from: usize, to: usize) -> Segment<'a> {
        Segment { y: self.y.slice_move(s![from..to, ..]), u: self.u.slice_move(s![from..to, ..]) }
    }
}

fn check_segments(segs: &[Segment], points: usize) -> Result<(usize, usize)> {
    let first = segs.first().ok_or_else(|| Error::Usage("no windows".into()))?;
    let (d, nu) = (first.y.ncols(), first.u.ncols());
    for seg in segs {
        if seg.points() < points {
            return Err(Error::shape("window length", points, seg.points()));
        }
        if seg.y.ncols() != d || seg.u.ncols() != nu {
            return Err(Error::shape("window width", d + nu, seg.y.ncols() + seg.u.ncols()));
        }
    }
    Ok((d, nu))
}

/// Time-major inputs `[y_t, u_t, latent]` for points `0..steps` of every
/// segment, each segment repeated `repeat` times (row `t·B·R + b·R + r`).
pub fn series_inputs(
    segs: &[Segment],
    steps: usize,
    repeat: usize,
    latent: Option<ArrayView2<f64>>,
) -> Result<Array2<f64>> {
    let (d, nu) = check_segments(segs, steps)?;
    let nz = latent.map_or(0, |z| z.ncols());
    let rows = segs.len() * repeat;
    if let Some(z) = latent {
        if z.nrows() != rows {
            return Err(Error::shape("latent rows", rows, z.nrows()));
        }
    }
    let mut out = Array2::zeros((steps * rows, d + nu + nz));
    for t in 0..steps {
        for (b, seg) in segs.iter().enumerate() {
            for r in 0..repeat {
                let row = t * rows + b * repeat + r;
                let mut dst = out.row_mut(row);
                dst.slice_mut(s![..d]).assign(&seg.y.row(t));
                dst.slice_mut(s![d..d + nu]).assign(&seg.u.row(t));
                if let Some(z) = latent {
                    dst.slice_mut(s![d + nu..]).assign(&z.row(b * repeat + r));
                }
            }
        }
    }
    Ok(out)
}

/// One-step-ahead targets `y_{t+1}` for `t in 0..steps`, laid out like
/// [`series_inputs`].
pub fn series_targets(segs: &[Segment], steps: usize, repeat: usize) -> Result<Array2<f64>> {
    let (d, _) = check_segments(segs, steps + 1)?;
    let rows = segs.len() * repeat;
    let mut out = Array2::zeros((steps * rows, d));
    for t in 0..steps {
        for (b, seg) in segs.iter().enumerate() {
            for r in 0..repeat {
                out.row_mut(t * rows + b * repeat + r).assign(&seg.y.row(t + 1));
            }
        }
    }
    Ok(out)
}

/// Mean one-step Gaussian NLL per window of a plain recurrent predictor,
/// summed over steps and dimensions. Gradients of that mean are accumulated
/// into `grad` when given.
pub fn rnn_objective(net: &GaussianRnn, segs: &[Segment], grad: Option<&mut GaussianRnn>) -> Result<f64> {
    let steps = segs.iter().map(Segment::points).min().unwrap_or(0).saturating_sub(1);
    if steps == 0 {
        return Err(Error::Usage("windows need at least two points".into()));
    }
    let xs = series_inputs(segs, steps, 1, None)?;
    let ys = series_targets(segs, steps, 1)?;
    let state = net.initial_state(segs.len());
    let scale = 1.0 / segs.len() as f64;
    match grad {
        None => {
            let (out, _) = net.predict_sequence(xs.view(), &state)?;
            Ok(gaussian_nll(ys.view(), out.mu.view(), out.log_sigma.view()).loss * scale)
        }
        Some(grad) => {
            let (out, tape) = net.forward_taped(xs.view(), &state)?;
            let terms = gaussian_nll(ys.view(), out.mu.view(), out.log_sigma.view());
            let dm = terms.d_mu * scale;
            let dl = terms.d_log_sigma * scale;
            net.backward(&tape, dm.view(), dl.view(), grad)?;
            Ok(terms.loss * scale)
        }
    }
}

/// Loss of the variational objective averaged over windows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ViLoss {
    pub loss: f64,
    pub kl: f64,
    pub recon: f64,
}

/// Gradient buffers for the trainable parts of a [`ViModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ViGrad {
    pub posterior: PosteriorNet,
    pub decoder: GaussianRnn,
}

impl ViGrad {
    pub fn zeros_for(model: &ViModel) -> Self {
        ViGrad { posterior: model.posterior.zeros_like(), decoder: model.decoder.zeros_like() }
    }
}

/// `λ·KL + L_y` for a batch of windows, using the supplied standard-normal
/// draws `eps` (`B·M × N_z`, row `b·M + m`). Each segment must hold
/// `steps + 1` points; the posterior is conditioned on all of them and the
/// decoder reconstructs points `1..=steps`.
pub fn vi_objective(
    model: &ViModel,
    segs: &[Segment],
    lambda: f64,
    eps: ArrayView2<f64>,
    samples: usize,
    grad: Option<&mut ViGrad>,
) -> Result<ViLoss> {
    let batch = segs.len();
    let nz = model.latent_dim();
    if samples == 0 {
        return Err(Error::Usage("at least one latent sample is required".into()));
    }
    if eps.dim() != (batch * samples, nz) {
        return Err(Error::shape("noise draws", format!("({}, {nz})", batch * samples), format!("{:?}", eps.dim())));
    }
    let points = segs.iter().map(Segment::points).min().unwrap_or(0);
    if points < 2 {
        return Err(Error::Usage("windows need at least two points".into()));
    }
    let steps = points - 1;
    let code = model.encode(segs, points)?;
    let (q, trace) = model.posterior.trace(code.view())?;
    let sigma = q.log_sigma.mapv(f64::exp);
    let mut z = Array2::zeros((batch * samples, nz));
    for b in 0..batch {
        for m in 0..samples {
            let r = b * samples + m;
            for i in 0..nz {
                z[[r, i]] = q.mean[[b, i]] + sigma[[b, i]] * eps[[r, i]];
            }
        }
    }
    let xs = series_inputs(segs, steps, samples, Some(z.view()))?;
    let ys = series_targets(segs, steps, samples)?;
    let state = model.decoder.initial_state(batch * samples);

    let mut kl = 0.0;
    let mut d_mean = Array2::zeros((batch, nz));
    let mut d_ls = Array2::zeros((batch, nz));
    for b in 0..batch {
        let (k, dm, dl) = kl_terms(q.mean.row(b), q.log_sigma.row(b), model.sigma_z);
        kl += k;
        d_mean.row_mut(b).assign(&(dm * (lambda / batch as f64)));
        d_ls.row_mut(b).assign(&(dl * (lambda / batch as f64)));
    }
    kl /= batch as f64;
    let scale = 1.0 / (batch * samples) as f64;

    let Some(grad) = grad else {
        let (out, _) = model.decoder.predict_sequence(xs.view(), &state)?;
        let recon = gaussian_nll(ys.view(), out.mu.view(), out.log_sigma.view()).loss * scale;
        return Ok(ViLoss { loss: lambda * kl + recon, kl, recon });
    };

    let (out, tape) = model.decoder.forward_taped(xs.view(), &state)?;
    let terms = gaussian_nll(ys.view(), out.mu.view(), out.log_sigma.view());
    let recon = terms.loss * scale;
    let dm = terms.d_mu * scale;
    let dl = terms.d_log_sigma * scale;
    let (dxs, _) = model.decoder.backward(&tape, dm.view(), dl.view(), &mut grad.decoder)?;
    let off = dxs.ncols() - nz;
    let rows = batch * samples;
    let mut dz = Array2::<f64>::zeros((rows, nz));
    for t in 0..steps {
        dz += &dxs.slice(s![t * rows..(t + 1) * rows, off..]);
    }
    for b in 0..batch {
        for m in 0..samples {
            let r = b * samples + m;
            for i in 0..nz {
                d_mean[[b, i]] += dz[[r, i]];
                d_ls[[b, i]] += sigma[[b, i]] * eps[[r, i]] * dz[[r, i]];
            }
        }
    }
    model.posterior.backward(&trace, d_mean.view(), d_ls.view(), &mut grad.posterior);
    Ok(ViLoss { loss: lambda * kl + recon, kl, recon })
}

/// Per-sample decoder NLL summed over time, `B·M` rows; used by tests and
/// diagnostics that need the unreduced reconstruction term.
pub fn recon_per_sample(
    decoder: &GaussianRnn,
    segs: &[Segment],
    z: ArrayView2<f64>,
    samples: usize,
) -> Result<Vec<f64>> {
    let steps = segs.iter().map(Segment::points).min().unwrap_or(0).saturating_sub(1);
    let xs = series_inputs(segs, steps, samples, Some(z))?;
    let ys = series_targets(segs, steps, samples)?;
    let rows = segs.len() * samples;
    let (out, _) = decoder.predict_sequence(xs.view(), &decoder.initial_state(rows))?;
    let mut per = vec![0.0; rows];
    for t in 0..steps {
        for (r, acc) in per.iter_mut().enumerate() {
            let row = t * rows + r;
            let a = ys.slice(s![row..row + 1, ..]);
            let terms = gaussian_nll(a, out.mu.slice(s![row..row + 1, ..]), out.log_sigma.slice(s![row..row + 1, ..]));
            *acc += terms.loss;
        }
    }
    Ok(per)
}
