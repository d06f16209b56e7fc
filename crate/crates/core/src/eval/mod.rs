//! Accuracy, calibration and latent-space diagnostics.

mod latent;
mod report;

pub use latent::{
    default_timestamps, lambda_selection, latent_analysis, max_offdiag, pca_spectrum, LambdaChoice, LatentAnalysis,
    LatentReport,
};
pub use report::{write_metric_csv, write_series_csv, MetricsReport};

use ndarray::{ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::simulate::empirical_quantile;
use crate::{Error, Result};

/// Which power of σ divides the squared residual in the log-likelihood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlDenominator {
    /// Gaussian log-density: `(y − μ)² / σ²`.
    #[default]
    Var,
    /// Literal variant with `(y − μ)² / σ`.
    Std,
}

impl std::str::FromStr for LlDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "var" => Ok(LlDenominator::Var),
            "std" => Ok(LlDenominator::Std),
            other => Err(Error::Usage(format!("unknown log-likelihood denominator {other:?}"))),
        }
    }
}

/// One-step predictions for one trajectory, aligned row by row with the
/// truth and the noisy observations over the evaluation window.
#[derive(Clone, Copy, Debug)]
pub struct OneStepCase<'a> {
    pub mu: ArrayView2<'a, f64>,
    pub sigma: ArrayView2<'a, f64>,
    pub phi: ArrayView2<'a, f64>,
    pub y: ArrayView2<'a, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepMetrics {
    pub e_mu: f64,
    pub e_sigma: f64,
    pub ll: f64,
    pub nll: f64,
}

fn column_var(a: ArrayView2<f64>, i: usize) -> f64 {
    let col = a.column(i);
    let n = col.len() as f64;
    let m = col.sum() / n;
    col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

/// Normalised errors of the predictive mean and the normalised
/// log-likelihood. `sigma_eps` is the observation noise per dimension in the
/// same units as the data.
pub fn onestep_metrics(cases: &[OneStepCase], sigma_eps: &[f64], denom: LlDenominator) -> Result<OneStepMetrics> {
    if cases.is_empty() || cases.iter().any(|c| c.mu.nrows() == 0) {
        return Err(Error::Usage("evaluation window is empty".into()));
    }
    let d = cases[0].mu.ncols();
    if sigma_eps.len() != d {
        return Err(Error::shape("noise levels", d, sigma_eps.len()));
    }
    for c in cases {
        if c.sigma.dim() != c.mu.dim() || c.phi.dim() != c.mu.dim() || c.y.dim() != c.mu.dim() {
            return Err(Error::shape("evaluation rows", c.mu.nrows(), c.phi.nrows()));
        }
    }
    let (mut se, mut spread, mut ll) = (0.0, 0.0, vec![0.0; d]);
    let mut points = 0usize;
    for c in cases {
        let n = c.mu.nrows() as f64;
        for i in 0..d {
            let var_phi = column_var(c.phi, i);
            let mse = c.mu.column(i).iter().zip(c.phi.column(i)).map(|(m, p)| (m - p) * (m - p)).sum::<f64>() / n;
            se += mse / var_phi;
            spread += column_var(c.mu, i) / var_phi;
            for t in 0..c.mu.nrows() {
                let s = c.sigma[[t, i]];
                let r = c.y[[t, i]] - c.mu[[t, i]];
                let q = match denom {
                    LlDenominator::Var => r * r / (s * s),
                    LlDenominator::Std => r * r / s,
                };
                ll[i] += -s.ln() - 0.5 * q;
            }
        }
        points += c.mu.nrows();
    }
    let k = (cases.len() * d) as f64;
    let ll_mean: Vec<f64> = ll.iter().map(|v| v / points as f64).collect();
    let nll = ll_mean.iter().zip(sigma_eps).map(|(l, s)| l / (-0.5 - s.ln())).sum::<f64>() / d as f64;
    Ok(OneStepMetrics {
        e_mu: (se / k).sqrt(),
        e_sigma: (spread / k).sqrt() - 1.0,
        ll: ll_mean.iter().sum::<f64>() / d as f64,
        nll,
    })
}

/// Fraction of observations inside the central Gaussian interval
/// `μ ± z σ` at each level, over all cases, steps and dimensions.
pub fn gaussian_coverage(cases: &[OneStepCase], levels: &[f64]) -> Vec<(f64, f64)> {
    let normal = Normal::standard();
    levels
        .iter()
        .map(|&p| {
            let z = normal.inverse_cdf(0.5 + p / 2.0);
            let (mut hit, mut total) = (0usize, 0usize);
            for c in cases {
                for ((m, s), y) in c.mu.iter().zip(c.sigma.iter()).zip(c.y.iter()) {
                    total += 1;
                    if (y - m).abs() <= z * s {
                        hit += 1;
                    }
                }
            }
            (p, hit as f64 / total.max(1) as f64)
        })
        .collect()
}

/// Ensemble of sample paths for one forecast and the matching reference
/// series (`[step, dim]`).
#[derive(Clone, Copy, Debug)]
pub struct ForecastCase<'a> {
    pub samples: ArrayView3<'a, f64>,
    pub reference: ArrayView2<'a, f64>,
}

/// Fraction of reference values inside the empirical central interval at
/// each level, pooled over cases, steps and dimensions.
pub fn coverage(cases: &[ForecastCase], levels: &[f64]) -> Vec<(f64, f64)> {
    let mut hits = vec![0usize; levels.len()];
    let mut total = 0usize;
    for c in cases {
        let (_, h, d) = c.samples.dim();
        for k in 0..h {
            for i in 0..d {
                let mut col: Vec<f64> = c.samples.slice(ndarray::s![.., k, i]).to_vec();
                col.sort_by(f64::total_cmp);
                let v = c.reference[[k, i]];
                for (hit, &p) in hits.iter_mut().zip(levels) {
                    let lo = empirical_quantile(&col, (1.0 - p) / 2.0);
                    let hi = empirical_quantile(&col, (1.0 + p) / 2.0);
                    if lo <= v && v <= hi {
                        *hit += 1;
                    }
                }
                total += 1;
            }
        }
    }
    levels.iter().zip(hits).map(|(&p, h)| (p, h as f64 / total.max(1) as f64)).collect()
}

/// Per-step error growth averaged over cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Growth {
    pub nmae: Vec<f64>,
    pub w95: Vec<f64>,
}

/// Normalised absolute error of the ensemble mean and normalised width of the
/// 95% interval at every step. `scale[c][i]` is the standard deviation of the
/// true series of case `c` in dimension `i`.
pub fn forecast_growth(cases: &[ForecastCase], scale: &[Vec<f64>]) -> Result<Growth> {
    if cases.is_empty() {
        return Err(Error::Usage("no forecast cases".into()));
    }
    let h = cases[0].samples.dim().1;
    let mut nmae = vec![0.0; h];
    let mut w95 = vec![0.0; h];
    for (c, sc) in cases.iter().zip(scale) {
        let (_, hc, d) = c.samples.dim();
        if hc != h || c.reference.nrows() < h {
            return Err(Error::shape("forecast horizon", h, hc));
        }
        for k in 0..h {
            for (i, &s) in sc.iter().enumerate().take(d) {
                let mut col: Vec<f64> = c.samples.slice(ndarray::s![.., k, i]).to_vec();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                col.sort_by(f64::total_cmp);
                let width = empirical_quantile(&col, 0.975) - empirical_quantile(&col, 0.025);
                nmae[k] += (mean - c.reference[[k, i]]).abs() / s / d as f64;
                w95[k] += width / s / d as f64;
            }
        }
    }
    let n = cases.len() as f64;
    Ok(Growth { nmae: nmae.iter().map(|v| v / n).collect(), w95: w95.iter().map(|v| v / n).collect() })
}

/// Normalised absolute error of the ensemble mean of each case at one step
/// (0-based), averaged over dimensions.
pub fn nmae_at(cases: &[ForecastCase], scale: &[Vec<f64>], step: usize) -> Vec<f64> {
    cases
        .iter()
        .zip(scale)
        .map(|(c, sc)| {
            let d = c.samples.dim().2;
            let means = c.samples.index_axis(Axis(1), step).mean_axis(Axis(0)).expect("non-empty ensemble");
            (0..d).map(|i| (means[i] - c.reference[[step, i]]).abs() / sc[i]).sum::<f64>() / d as f64
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Population standard deviation of each column.
pub fn column_std(a: ArrayView2<f64>) -> Vec<f64> {
    (0..a.ncols()).map(|i| column_var(a, i).sqrt()).collect()
}
