use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dyngen::Dataset;
use crate::rng::stream_rng;
use crate::vi_model::{kl_per_dim, Segment, ViModel};
use crate::{Error, Result};

const CHUNK: usize = 64;

/// Summary of the posterior over a pool of (trajectory, timestamp) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentReport {
    pub timestamps: Vec<usize>,
    pub n_posteriors: usize,
    pub draws_per_posterior: usize,
    pub corr_zz: Vec<Vec<f64>>,
    pub dkl_per_dim: Vec<f64>,
    pub pca_eigs: Vec<f64>,
    pub zeta: Vec<f64>,
    pub param_names: Vec<String>,
    pub corr_z_param: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Report plus the pooled draws it was computed from.
#[derive(Clone, Debug)]
pub struct LatentAnalysis {
    pub report: LatentReport,
    /// Posterior means, one row per (trajectory, timestamp).
    pub means: Array2<f64>,
    /// Latent draws, `draws` consecutive rows per posterior.
    pub samples: Array2<f64>,
    /// Identifiable parameters of the trajectory behind each draw.
    pub sample_params: Array2<f64>,
}

/// `count` timestamps evenly spaced over `[from, to]`, rounded to integers.
pub fn default_timestamps(from: usize, to: usize, count: usize) -> Vec<usize> {
    if count <= 1 || to <= from {
        return vec![to];
    }
    (0..count)
        .map(|i| from + ((to - from) as f64 * i as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Evaluate `q(z | Y_{0:t})` for every listed trajectory and timestamp, draw
/// `draws` samples from each, and summarise: correlation between latent
/// coordinates, per-dimension KL from the prior, the PCA spectrum of the
/// posterior means with its cumulative ratios, and correlation of the draws
/// with each trajectory's identifiable parameters.
pub fn latent_analysis(
    model: &ViModel,
    ds: &Dataset,
    trajs: &[usize],
    timestamps: &[usize],
    draws: usize,
    seed: u64,
) -> Result<LatentAnalysis> {
    let nz = model.latent_dim();
    if trajs.is_empty() || timestamps.is_empty() || draws == 0 {
        return Err(Error::Usage("latent analysis needs trajectories, timestamps and draws".into()));
    }
    if let Some(&t) = timestamps.iter().find(|&&t| t > ds.steps()) {
        return Err(Error::Range(format!("timestamp {t} beyond trajectory length {}", ds.steps())));
    }
    let n_post = trajs.len() * timestamps.len();
    let mut means = Array2::zeros((n_post, nz));
    let mut log_sigmas = Array2::zeros((n_post, nz));
    let mut owners = Vec::with_capacity(n_post);
    let mut row = 0;
    for &t in timestamps {
        for chunk in trajs.chunks(CHUNK) {
            let segs: Vec<Segment> = chunk
                .iter()
                .map(|&k| {
                    let n = ds.normalized(k);
                    Segment { y: n.y.view(), u: n.u.view() }.slice(0, t + 1)
                })
                .collect();
            let q = model.posterior(&segs)?;
            means.slice_mut(s![row..row + chunk.len(), ..]).assign(&q.mean);
            log_sigmas.slice_mut(s![row..row + chunk.len(), ..]).assign(&q.log_sigma);
            owners.extend_from_slice(chunk);
            row += chunk.len();
        }
    }

    let mut warnings = Vec::new();
    let n_samples = n_post * draws;
    if n_samples < nz || n_post < nz {
        warnings.push(format!(
            "only {n_post} posteriors ({n_samples} draws) for {nz} latent dimensions; covariance is rank deficient"
        ));
    }

    let mut rng = stream_rng(seed, 0);
    let mut samples = Array2::zeros((n_samples, nz));
    for p in 0..n_post {
        for j in 0..draws {
            for i in 0..nz {
                let e: f64 = rng.sample(StandardNormal);
                samples[[p * draws + j, i]] = means[[p, i]] + log_sigmas[[p, i]].exp() * e;
            }
        }
    }

    let mut dkl = vec![0.0; nz];
    for p in 0..n_post {
        let k = kl_per_dim(means.row(p), log_sigmas.row(p), model.sigma_z);
        for (acc, v) in dkl.iter_mut().zip(k.iter()) {
            *acc += v / n_post as f64;
        }
    }

    let cols: Vec<Vec<f64>> = (0..nz).map(|i| samples.column(i).to_vec()).collect();
    let mut corr_zz = vec![vec![0.0; nz]; nz];
    for i in 0..nz {
        for j in 0..nz {
            corr_zz[i][j] = if i == j {
                1.0
            } else {
                pearson(&cols[i], &cols[j]).unwrap_or_else(|| {
                    warnings.push(format!("latent dimensions {i} and {j}: correlation undefined (zero variance)"));
                    0.0
                })
            };
        }
    }
    warnings.dedup();

    let (pca_eigs, zeta) = pca_spectrum(&means);

    let first = &ds.trajectories[trajs[0]].params.identifiable();
    let param_names: Vec<String> = first.iter().map(|(n, _)| n.to_string()).collect();
    let n_par = param_names.len();
    let mut sample_params = Array2::zeros((n_samples, n_par));
    for (p, &k) in owners.iter().enumerate() {
        let vals = ds.trajectories[k].params.identifiable();
        for j in 0..draws {
            for (c, (_, v)) in vals.iter().enumerate() {
                sample_params[[p * draws + j, c]] = *v;
            }
        }
    }
    let corr_z_param = (0..nz)
        .map(|i| {
            (0..n_par)
                .map(|c| pearson(&cols[i], &sample_params.column(c).to_vec()).unwrap_or(0.0))
                .collect()
        })
        .collect();

    Ok(LatentAnalysis {
        report: LatentReport {
            timestamps: timestamps.to_vec(),
            n_posteriors: n_post,
            draws_per_posterior: draws,
            corr_zz,
            dkl_per_dim: dkl,
            pca_eigs,
            zeta,
            param_names,
            corr_z_param,
            warnings,
        },
        means,
        samples,
        sample_params,
    })
}

/// Eigenvalues of the sample covariance of the rows of `x`, descending, and
/// their cumulative share of the total.
pub fn pca_spectrum(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.dim();
    if d == 0 {
        return (Vec::new(), Vec::new());
    }
    let mean = x.sum_axis(ndarray::Axis(0)) / n as f64;
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let mut eigs: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    eigs.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eigs.iter().sum();
    let mut zeta = Vec::with_capacity(d);
    let mut acc = 0.0;
    for (i, e) in eigs.iter().enumerate() {
        acc += e;
        zeta.push(if total > 0.0 { if i + 1 == d { 1.0 } else { (acc / total).min(1.0) } } else { 1.0 });
    }
    (eigs, zeta)
}

/// Largest absolute off-diagonal entry.
pub fn max_offdiag(corr: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in corr.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                m = m.max(v.abs());
            }
        }
    }
    m
}

/// Outcome of the penalty-selection rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaChoice {
    /// Smallest qualifying penalty, if any.
    pub lambda: Option<f64>,
    pub delta: f64,
    /// `(λ, max off-diagonal |corr|)`, sorted by λ.
    pub max_offdiag: Vec<(f64, f64)>,
}

/// Smallest `λ` whose latent correlation matrix is within `delta` of the
/// identity in max-norm.
pub fn lambda_selection(reports: &[(f64, Vec<Vec<f64>>)], delta: f64) -> Result<LambdaChoice> {
    if reports.is_empty() {
        return Err(Error::Usage("no correlation reports to choose from".into()));
    }
    let mut table: Vec<(f64, f64)> = reports.iter().map(|(l, c)| (*l, max_offdiag(c))).collect();
    table.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lambda = table.iter().find(|(_, m)| *m < delta).map(|(l, _)| *l);
    Ok(LambdaChoice { lambda, delta, max_offdiag: table })
}
