//! Encoder, posterior network and decoder, their objectives, and the
//! training loops (encoder pretraining, then posterior plus decoder).

mod objective;
mod posterior;
mod train;

pub use objective::{
    recon_per_sample, rnn_objective, series_inputs, series_targets, vi_objective, Segment, ViGrad,
    ViLoss,
};
pub use posterior::{PosteriorBatch, PosteriorGaussian, PosteriorNet, POSTERIOR_DEPTH};
pub use train::{
    sample_windows, segments, train_rnn, train_vi, validation_windows, LogRow, TrainOutcome, Window,
};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{gaussian_nll, join, GaussianRnn, Parameters, StackState};
use crate::optim::LrSchedule;
use crate::{Error, Result};

/// Pretrained encoder: a recurrent Gaussian predictor over `y‖u` whose final
/// hidden state is the code fed to the posterior network.
pub type EncoderModel = GaussianRnn;
/// Recurrent Gaussian predictor over `y‖u‖z`.
pub type DecoderModel = GaussianRnn;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    pub lambda: f64,
    pub sigma_z: f64,
    pub seq_len: usize,
    pub batch: usize,
    pub samples: usize,
    pub iterations: usize,
    pub xi_max: f64,
    pub xi_min: f64,
    pub clip: f64,
    pub val_every: usize,
    pub val_windows: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 128,
            latent_dim: 10,
            lambda: 1.0,
            sigma_z: 1.0,
            seq_len: 200,
            batch: 20,
            samples: 25,
            iterations: 30_000,
            xi_max: 1e-3,
            xi_min: 1e-4,
            clip: 5.0,
            val_every: 500,
            val_windows: 20,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { xi_min: self.xi_min, xi_max: self.xi_max, total: self.iterations }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        let positive = [
            ("hidden", self.hidden),
            ("seq_len", self.seq_len),
            ("batch", self.batch),
            ("samples", self.samples),
            ("val_every", self.val_every),
            ("val_windows", self.val_windows),
            ("log_every", self.log_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Range(format!("{name} must be positive")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Range(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if !(self.sigma_z > 0.0) {
            return Err(Error::Range(format!("sigma_z must be positive, got {}", self.sigma_z)));
        }
        if !(self.clip >= 0.0) {
            return Err(Error::Range(format!("clip must be non-negative, got {}", self.clip)));
        }
        Ok(())
    }
}

/// Frozen encoder plus the trainable posterior network and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ViModel {
    pub encoder: EncoderModel,
    pub posterior: PosteriorNet,
    pub decoder: DecoderModel,
    pub sigma_z: f64,
}

impl Parameters for ViModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.posterior.visit(&join(prefix, "posterior"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.encoder.visit_mut(f);
        self.posterior.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

impl ViModel {
    /// All-zero model with the given widths, for loading saved parameters.
    pub fn zeros(input: usize, encoder_hidden: usize, hidden: usize, latent: usize, output: usize, sigma_z: f64) -> Self {
        ViModel {
            encoder: GaussianRnn::zeros(input, encoder_hidden, output),
            posterior: PosteriorNet::zeros(2 * encoder_hidden, latent),
            decoder: GaussianRnn::zeros(input + latent, hidden, output),
            sigma_z,
        }
    }

    pub fn init<R: Rng + ?Sized>(
        encoder: EncoderModel,
        hidden: usize,
        latent: usize,
        sigma_z: f64,
        rng: &mut R,
    ) -> Self {
        let code = 2 * encoder.hidden();
        let posterior = PosteriorNet::init(code, latent, rng);
        let decoder = GaussianRnn::init(encoder.input_dim() + latent, hidden, encoder.output_dim(), rng);
        ViModel { encoder, posterior, decoder, sigma_z }
    }

    pub fn latent_dim(&self) -> usize {
        self.posterior.latent_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn forcing_dim(&self) -> usize {
        self.encoder.input_dim() - self.obs_dim()
    }

    /// Encoder code after consuming the first `points` points of each segment
    /// from a zero state, `B × 2N`.
    pub fn encode(&self, segs: &[Segment], points: usize) -> Result<Array2<f64>> {
        let xs = series_inputs(segs, points, 1, None)?;
        let state = self.encoder.stack.run(xs.view(), &StackState::zeros(segs.len(), self.encoder.hidden()))?;
        Ok(state.code())
    }

    /// Posterior over `z` given the whole of each segment.
    pub fn posterior(&self, segs: &[Segment]) -> Result<PosteriorBatch> {
        let points = segs.iter().map(Segment::points).min().unwrap_or(0);
        if points == 0 {
            return Err(Error::Usage("posterior needs at least one observed point".into()));
        }
        let code = self.encode(segs, points)?;
        self.posterior.forward(code.view())
    }
}

/// Closed-form `KL(q ‖ N(0, σ_z² I))` for a diagonal Gaussian.
pub fn kl_gaussian(q: &PosteriorGaussian, sigma_z: f64) -> f64 {
    let var_z = sigma_z * sigma_z;
    q.m_q
        .iter()
        .zip(&q.sigma_q)
        .map(|(&m, &s)| 0.5 * (s * s + m * m) / var_z - (s / sigma_z).ln() - 0.5)
        .sum()
}

/// Per-dimension KL terms for one posterior row parameterised by its log scale.
pub fn kl_per_dim(mean: ArrayView1<f64>, log_sigma: ArrayView1<f64>, sigma_z: f64) -> Array1<f64> {
    let var_z = sigma_z * sigma_z;
    let mut out = Array1::zeros(mean.len());
    for i in 0..mean.len() {
        let s2 = (2.0 * log_sigma[i]).exp();
        out[i] = 0.5 * (s2 + mean[i] * mean[i]) / var_z - (log_sigma[i] - sigma_z.ln()) - 0.5;
    }
    out
}

/// KL and its derivatives with respect to the mean and log scale.
pub(crate) fn kl_terms(
    mean: ArrayView1<f64>,
    log_sigma: ArrayView1<f64>,
    sigma_z: f64,
) -> (f64, Array1<f64>, Array1<f64>) {
    let var_z = sigma_z * sigma_z;
    let kl = kl_per_dim(mean, log_sigma, sigma_z).sum();
    let dm = mean.mapv(|m| m / var_z);
    let dl = log_sigma.mapv(|l| (2.0 * l).exp() / var_z - 1.0);
    (kl, dm, dl)
}

/// Latent draws `z = m_q + σ_q ⊙ ε` together with the `ε` that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamSample {
    pub z: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
}

pub fn reparam_sample<R: Rng + ?Sized>(q: &PosteriorGaussian, m: usize, rng: &mut R) -> ReparamSample {
    let mut z = Vec::with_capacity(m);
    let mut eps = Vec::with_capacity(m);
    for _ in 0..m {
        let e: Vec<f64> = (0..q.m_q.len()).map(|_| rng.sample(StandardNormal)).collect();
        z.push(q.m_q.iter().zip(&q.sigma_q).zip(&e).map(|((m, s), e)| m + s * e).collect());
        eps.push(e);
    }
    ReparamSample { z, eps }
}

/// Monte Carlo reconstruction term over one window and its adjoints with
/// respect to every predicted mean and log scale (rows `t·M + m`).
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub loss: f64,
    pub d_mu: Array2<f64>,
    pub d_log_sigma: Array2<f64>,
}

pub fn reconstruction_loss(decoder: &DecoderModel, window: Segment, z: &[Vec<f64>]) -> Result<Reconstruction> {
    let m = z.len();
    if m == 0 {
        return Err(Error::Usage("at least one latent sample is required".into()));
    }
    let nz = z[0].len();
    let flat: Vec<f64> = z.iter().flatten().copied().collect();
    let z = Array2::from_shape_vec((m, nz), flat).map_err(|_| Error::shape("latent samples", nz, 0))?;
    let steps = window.points().saturating_sub(1);
    if steps == 0 {
        return Err(Error::Usage("windows need at least two points".into()));
    }
    let segs = [window];
    let xs = series_inputs(&segs, steps, m, Some(z.view()))?;
    let ys = series_targets(&segs, steps, m)?;
    let (out, _) = decoder.predict_sequence(xs.view(), &decoder.initial_state(m))?;
    let terms = gaussian_nll(ys.view(), out.mu.view(), out.log_sigma.view());
    let scale = 1.0 / m as f64;
    Ok(Reconstruction { loss: terms.loss * scale, d_mu: terms.d_mu * scale, d_log_sigma: terms.d_log_sigma * scale })
}

#[cfg(test)]
mod tests;
