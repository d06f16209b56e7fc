use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;

use crate::nn::{join, relu, relu_backward, Linear, Parameters, LOG_SIGMA_MAX, LOG_SIGMA_MIN};
use crate::{Error, Result};

pub const POSTERIOR_DEPTH: usize = 3;

/// Feed-forward map from an encoder code to a diagonal Gaussian over `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorNet {
    pub layers: Vec<Linear>,
    pub mean: Linear,
    pub log_sigma: Linear,
}

/// Diagonal Gaussian for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGaussian {
    pub m_q: Vec<f64>,
    pub sigma_q: Vec<f64>,
}

/// Posterior parameters for a batch of codes, one row per window.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorBatch {
    pub mean: Array2<f64>,
    pub log_sigma: Array2<f64>,
}

impl PosteriorBatch {
    pub fn row(&self, b: usize) -> PosteriorGaussian {
        PosteriorGaussian {
            m_q: self.mean.row(b).to_vec(),
            sigma_q: self.log_sigma.row(b).iter().map(|v| v.exp()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct PosteriorTrace {
    inputs: Vec<Array2<f64>>,
    pub(crate) pre: Vec<Array2<f64>>,
    top: Array2<f64>,
    raw_log_sigma: Array2<f64>,
}

impl PosteriorNet {
    pub fn zeros(code: usize, latent: usize) -> Self {
        let width = code;
        PosteriorNet {
            layers: (0..POSTERIOR_DEPTH).map(|_| Linear::zeros(width, width)).collect(),
            mean: Linear::zeros(width, latent),
            log_sigma: Linear::zeros(width, latent),
        }
    }

    pub fn init<R: Rng + ?Sized>(code: usize, latent: usize, rng: &mut R) -> Self {
        let width = code;
        PosteriorNet {
            layers: (0..POSTERIOR_DEPTH).map(|_| Linear::init(width, width, rng)).collect(),
            mean: Linear::init(width, latent, rng),
            log_sigma: Linear::init(width, latent, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PosteriorNet::zeros(self.code_dim(), self.latent_dim())
    }

    pub fn code_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.out_dim()
    }

    pub(crate) fn trace(&self, code: ArrayView2<f64>) -> Result<(PosteriorBatch, PosteriorTrace)> {
        if code.ncols() != self.code_dim() {
            return Err(Error::shape("posterior input", self.code_dim(), code.ncols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = code.to_owned();
        for layer in &self.layers {
            let a = layer.apply(x.view());
            let next = relu(&a);
            inputs.push(x);
            pre.push(a);
            x = next;
        }
        let mean = self.mean.apply(x.view());
        let raw = self.log_sigma.apply(x.view());
        let log_sigma = raw.mapv(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
        Ok((PosteriorBatch { mean, log_sigma }, PosteriorTrace { inputs, pre, top: x, raw_log_sigma: raw }))
    }

    pub fn forward(&self, code: ArrayView2<f64>) -> Result<PosteriorBatch> {
        Ok(self.trace(code)?.0)
    }

    pub(crate) fn backward(
        &self,
        trace: &PosteriorTrace,
        d_mean: ArrayView2<f64>,
        d_log_sigma: ArrayView2<f64>,
        grad: &mut PosteriorNet,
    ) -> Array2<f64> {
        let mut d_raw = d_log_sigma.to_owned();
        Zip::from(&mut d_raw).and(&trace.raw_log_sigma).for_each(|d, &v| {
            if !(LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&v) {
                *d = 0.0;
            }
        });
        let mut dx = self.mean.backward(trace.top.view(), d_mean, &mut grad.mean);
        dx += &self.log_sigma.backward(trace.top.view(), d_raw.view(), &mut grad.log_sigma);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let da = relu_backward(trace.pre[i].view(), dx.view());
            dx = layer.backward(trace.inputs[i].view(), da.view(), &mut grad.layers[i]);
        }
        dx
    }
}

impl Parameters for PosteriorNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{i}")), f);
        }
        self.mean.visit(&join(prefix, "mean"), f);
        self.log_sigma.visit(&join(prefix, "log_sigma"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
        self.mean.visit_mut(f);
        self.log_sigma.visit_mut(f);
    }
}
