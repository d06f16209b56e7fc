use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use vidyn::dyngen::{generate_dataset, read_dataset, write_dataset, Dataset};
use vidyn::eval::{
    column_std, coverage, default_timestamps, forecast_growth, gaussian_coverage, lambda_selection, latent_analysis,
    median, nmae_at, onestep_metrics, write_metric_csv, write_series_csv, ForecastCase, LambdaChoice, LatentReport,
    MetricsReport, OneStepCase,
};
use vidyn::rng::derive_seed;
use vidyn::simulate::{
    forecast_seed, mc_forecast, one_step_predict, read_ensemble_csv, summarize, write_ensemble_csv,
    write_summary_csv, ForecastEnsemble, Predictor,
};
use vidyn::vi_model::{train_rnn, train_vi, LogRow, Segment, TrainConfig};
use vidyn::{Error, Result};

use crate::checkpoint::{Checkpoint, Model, ModelKind, Provenance};
use crate::config::RunConfig;

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("--{what} is required")))
}

/// `target` as seen from directory `from`.
fn relative(from: &Path, target: &Path) -> PathBuf {
    let (Ok(from), Ok(target)) = (fs::canonicalize(from), fs::canonicalize(target)) else {
        return target.to_path_buf();
    };
    let a: Vec<_> = from.components().collect();
    let b: Vec<_> = target.components().collect();
    let common = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..a.len() {
        out.push("..");
    }
    for c in &b[common..] {
        out.push(c);
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    out
}

/// Create the output directory and record the resolved config there, with
/// paths relative to it so that the record does not depend on where the run
/// lives.
fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = need(&cfg.out, "out")?;
    fs::create_dir_all(dir)?;
    let mut rec = cfg.clone();
    rec.out = Some(PathBuf::from("."));
    rec.dataset = cfg.dataset.as_deref().map(|d| relative(dir, d));
    fs::write(dir.join("config.json"), rec.to_json())?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_str(&text)?)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Format(format!("{other:?}")),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    read_dataset(need(&cfg.dataset, "dataset")?)
}

/// Trajectories used for evaluation: the validation split, or every
/// trajectory when there is none.
pub fn eval_trajectories(ds: &Dataset) -> Vec<usize> {
    if ds.split.val.is_empty() {
        (0..ds.len()).collect()
    } else {
        ds.split.val.clone()
    }
}

fn segment(ds: &Dataset, k: usize) -> Segment<'_> {
    let n = ds.normalized(k);
    Segment { y: n.y.view(), u: n.u.view() }
}

pub fn generate(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = need(&cfg.out, "out")?;
    let ds = generate_dataset(&cfg.generate_config())?;
    write_dataset(dir, &ds)?;
    println!(
        "generated {} trajectories of {} steps ({} train / {} validation) in {}",
        ds.len(),
        ds.steps(),
        ds.split.train.len(),
        ds.split.val.len(),
        dir.display()
    );
    Ok(dir.to_path_buf())
}

fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["iter", "lr", "loss", "L_q", "L_y", "val_loss"]).map_err(csv_err)?;
    for r in log {
        let val = r.val_loss.map_or(String::new(), |v| format!("{v}"));
        w.write_record([r.iter.to_string(), format!("{}", r.lr), format!("{}", r.loss), format!("{}", r.l_q), format!("{}", r.l_y), val])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn check_compatible(ckpt: &Checkpoint, ds: &Dataset) -> Result<()> {
    if ckpt.manifest.norm_stats != ds.norm_stats || ckpt.manifest.system != ds.system {
        return Err(Error::Usage("checkpoint was trained on a different dataset".into()));
    }
    Ok(())
}

/// Train a recurrent model (`encoder` or `baseline`). The baseline uses a
/// seed derived from the configured one so that it is an independent run of
/// the same procedure.
pub fn train_recurrent(cfg: &RunConfig, kind: ModelKind) -> Result<PathBuf> {
    let ds = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let mut tc = TrainConfig { latent_dim: 0, ..cfg.train.clone() };
    if kind == ModelKind::Baseline {
        tc.seed = derive_seed(tc.seed, "baseline");
    }
    let clock = Instant::now();
    let run = train_rnn(&ds, &tc)?;
    let path = dir.join(format!("{}.ckpt", kind.name()));
    let prov = Provenance {
        system: ds.system,
        norm_stats: &ds.norm_stats,
        config: &tc,
        iteration: run.best_iteration,
        val_loss: run.best_val_loss,
    };
    Checkpoint::new(kind, Model::Rnn(run.model), prov).save(&path)?;
    write_log(&dir.join("train_log.csv"), &run.log)?;
    eprintln!(
        "{}: best validation loss {:.5} at iteration {} ({:.0} s)",
        kind.name(),
        run.best_val_loss,
        run.best_iteration,
        clock.elapsed().as_secs_f64()
    );
    Ok(path)
}

/// Train one latent-variable model per configured penalty weight on top of a
/// frozen encoder.
pub fn train_latent(cfg: &RunConfig, encoder: &Path) -> Result<Vec<PathBuf>> {
    let ds = load_dataset(cfg)?;
    let enc = Checkpoint::load(encoder)?;
    check_compatible(&enc, &ds)?;
    let enc = enc.rnn()?.clone();
    let dir = out_dir(cfg)?;
    let mut paths = Vec::new();
    for &lambda in &cfg.lambdas {
        let tc = TrainConfig { lambda, ..cfg.train.clone() };
        let clock = Instant::now();
        let run = train_vi(&ds, &enc, &tc)?;
        let path = dir.join(format!("vi_lambda_{lambda}.ckpt"));
        let prov = Provenance {
            system: ds.system,
            norm_stats: &ds.norm_stats,
            config: &tc,
            iteration: run.best_iteration,
            val_loss: run.best_val_loss,
        };
        Checkpoint::new(ModelKind::Vi, Model::Vi(run.model), prov).save(&path)?;
        write_log(&dir.join(format!("train_log_lambda_{lambda}.csv")), &run.log)?;
        eprintln!(
            "vi λ={lambda}: best validation loss {:.5} at iteration {} ({:.0} s)",
            run.best_val_loss,
            run.best_iteration,
            clock.elapsed().as_secs_f64()
        );
        paths.push(path);
    }
    Ok(paths)
}

fn predictor(ckpt: &Checkpoint) -> Predictor<'_> {
    match &ckpt.model {
        Model::Rnn(m) => Predictor::Rnn(m),
        Model::Vi(m) => Predictor::Vi(m),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastEntry {
    pub traj: usize,
    pub start: usize,
    pub ensemble: String,
    pub summary: String,
    /// First step at which a sample path left the finite range.
    pub diverged_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastIndex {
    pub model: String,
    pub horizon: usize,
    pub samples: usize,
    pub tau: usize,
    pub cases: Vec<ForecastEntry>,
}

fn write_bands(path: &Path, ds: &Dataset, traj: usize, start: usize, ens: &ForecastEnsemble) -> Result<()> {
    let sum = summarize(ens, &[]);
    let n = ds.normalized(traj);
    let h = ens.horizon();
    let t: Vec<f64> = (1..=h).map(|k| (start + k) as f64).collect();
    let col = |a: &Array2<f64>, from: usize| a.slice(s![from..from + h, 0]).to_vec();
    let (phi, y) = (col(&n.phi, start + 1), col(&n.y, start + 1));
    let (mean, lo, hi) = (col(&sum.mean, 0), col(&sum.q025, 0), col(&sum.q975, 0));
    write_series_csv(
        create(path)?,
        &["t", "truth", "observed", "mean", "q025", "q975"],
        &[&t, &phi, &y, &mean, &lo, &hi],
    )
}

/// Monte Carlo forecasts from every configured origin of every evaluation
/// trajectory. A diverging case is reported, its partial paths are kept, and
/// the run continues.
pub fn forecast(cfg: &RunConfig, checkpoint: &Path) -> Result<ForecastIndex> {
    let ds = load_dataset(cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    check_compatible(&ckpt, &ds)?;
    let dir = out_dir(cfg)?;
    let sim = &cfg.sim;
    if let Some(s) = sim.starts.iter().find(|&&s| s + sim.horizon > ds.steps()) {
        return Err(Error::Range(format!("origin {s} plus horizon {} exceeds {} steps", sim.horizon, ds.steps())));
    }
    let model = predictor(&ckpt);
    let mut cases = Vec::new();
    for k in eval_trajectories(&ds) {
        let seg = segment(&ds, k);
        for &start in &sim.starts {
            let hist = seg.slice(start - sim.tau, start + 1);
            let u = ds.normalized(k).u.slice(s![start + 1..start + sim.horizon, ..]);
            let seed = forecast_seed(sim.seed, k, start);
            let (ens, diverged_at) = match mc_forecast(model, hist, u, sim.forecast_samples, sim.horizon, seed) {
                Ok(e) => (e, None),
                Err(Error::ForecastDiverged { step, sample, partial }) => {
                    eprintln!("trajectory {k} from {start}: sample {sample} diverged at step {step}");
                    (*partial, Some(step))
                }
                Err(e) => return Err(e),
            };
            let name = format!("k{k:04}_t{start:04}");
            let entry = ForecastEntry {
                traj: k,
                start,
                ensemble: format!("forecast_{name}.csv"),
                summary: format!("summary_{name}.csv"),
                diverged_at,
            };
            write_ensemble_csv(create(&dir.join(&entry.ensemble))?, &ens)?;
            write_summary_csv(create(&dir.join(&entry.summary))?, &summarize(&ens, &sim.levels))?;
            if cases.is_empty() && diverged_at.is_none() {
                write_bands(&dir.join("fig_forecast_bands.csv"), &ds, k, start, &ens)?;
            }
            cases.push(entry);
        }
    }
    let index = ForecastIndex {
        model: ckpt.manifest.kind.name().into(),
        horizon: sim.horizon,
        samples: sim.forecast_samples,
        tau: sim.tau,
        cases,
    };
    write_json(&dir.join("index.json"), &index)?;
    println!("wrote {} forecasts to {}", index.cases.len(), dir.display());
    Ok(index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepEntry {
    pub traj: usize,
    pub start: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepIndex {
    pub model: String,
    pub tau: usize,
    pub samples: usize,
    pub cases: Vec<OneStepEntry>,
}

fn write_onestep_csv(path: &Path, start: usize, mu: &Array2<f64>, sigma: &Array2<f64>) -> Result<()> {
    let d = mu.ncols();
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|i| format!("mu_{i}")));
    header.extend((0..d).map(|i| format!("sigma_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..mu.nrows() {
        let mut rec = vec![(start + r).to_string()];
        rec.extend(mu.row(r).iter().map(|v| format!("{v}")));
        rec.extend(sigma.row(r).iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the first index and the `(μ, σ)` arrays.
pub fn read_onestep_csv(path: &Path) -> Result<(usize, Array2<f64>, Array2<f64>)> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let d = (r.headers().map_err(csv_err)?.len().saturating_sub(1)) / 2;
    let (mut start, mut mu, mut sigma, mut rows) = (None, Vec::new(), Vec::new(), 0);
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format(format!("{}: bad value", path.display())))
        };
        start.get_or_insert(num(0)? as usize);
        mu.extend((0..d).map(|i| num(1 + i)).collect::<Result<Vec<_>>>()?);
        sigma.extend((0..d).map(|i| num(1 + d + i)).collect::<Result<Vec<_>>>()?);
        rows += 1;
    }
    let shape = |v| Array2::from_shape_vec((rows, d), v).map_err(|e| Error::Format(e.to_string()));
    Ok((start.unwrap_or(0), shape(mu)?, shape(sigma)?))
}

/// One-step-ahead predictive mixtures over every evaluation trajectory.
pub fn onestep(cfg: &RunConfig, checkpoint: &Path) -> Result<OneStepIndex> {
    let ds = load_dataset(cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    check_compatible(&ckpt, &ds)?;
    let dir = out_dir(cfg)?;
    let model = predictor(&ckpt);
    let mut cases = Vec::new();
    for k in eval_trajectories(&ds) {
        let seed = derive_seed(cfg.sim.seed, &format!("onestep/{k}"));
        let p = one_step_predict(model, segment(&ds, k), cfg.sim.tau, cfg.sim.onestep_samples, seed)?;
        let file = format!("onestep_k{k:04}.csv");
        write_onestep_csv(&dir.join(&file), p.start, &p.mu, &p.sigma)?;
        cases.push(OneStepEntry { traj: k, start: p.start, file });
    }
    let index = OneStepIndex {
        model: ckpt.manifest.kind.name().into(),
        tau: cfg.sim.tau,
        samples: cfg.sim.onestep_samples,
        cases,
    };
    write_json(&dir.join("index.json"), &index)?;
    println!("wrote {} one-step predictions to {}", index.cases.len(), dir.display());
    Ok(index)
}

/// Metrics over saved one-step and/or forecast outputs.
pub fn evaluate(cfg: &RunConfig, forecasts: Option<&Path>, onestep_dir: Option<&Path>, name: &str) -> Result<MetricsReport> {
    if forecasts.is_none() && onestep_dir.is_none() {
        return Err(Error::Usage("evaluate needs --forecasts and/or --onestep".into()));
    }
    let ds = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let levels = &cfg.sim.levels;
    let mut report = MetricsReport {
        model: name.to_string(),
        e_mu: None,
        e_sigma: None,
        ll: None,
        nll: None,
        cp_onestep: Vec::new(),
        cp_forecast: Vec::new(),
        growth: None,
        median_nmae_final: None,
        n_test: 0,
        horizon: 0,
    };

    if let Some(od) = onestep_dir {
        let index: OneStepIndex = read_json(&od.join("index.json"))?;
        let loaded: Vec<(usize, usize, Array2<f64>, Array2<f64>)> = index
            .cases
            .iter()
            .map(|c| read_onestep_csv(&od.join(&c.file)).map(|(s, m, sg)| (c.traj, s, m, sg)))
            .collect::<Result<_>>()?;
        let mut cases = Vec::new();
        for (k, start, mu, sigma) in &loaded {
            let n = ds.normalized(*k);
            let rows = s![*start..*start + mu.nrows(), ..];
            if start + mu.nrows() > n.y.nrows() {
                return Err(Error::Usage(format!("one-step output for trajectory {k} does not match the dataset")));
            }
            cases.push(OneStepCase { mu: mu.view(), sigma: sigma.view(), phi: n.phi.slice(rows), y: n.y.slice(rows) });
        }
        let m = onestep_metrics(&cases, &ds.noise_sigma_normalized(), cfg.eval.ll_denominator)?;
        report.e_mu = Some(m.e_mu);
        report.e_sigma = Some(m.e_sigma);
        report.ll = Some(m.ll);
        report.nll = Some(m.nll);
        report.cp_onestep = gaussian_coverage(&cases, levels);
        report.n_test = cases.len();
    }

    if let Some(fd) = forecasts {
        let index: ForecastIndex = read_json(&fd.join("index.json"))?;
        let kept: Vec<&ForecastEntry> = index.cases.iter().filter(|c| c.diverged_at.is_none()).collect();
        if kept.len() < index.cases.len() {
            eprintln!("skipping {} diverged forecasts", index.cases.len() - kept.len());
        }
        let ens: Vec<Array3<f64>> = kept
            .iter()
            .map(|c| read_ensemble_csv(BufReader::new(File::open(fd.join(&c.ensemble))?)))
            .collect::<Result<_>>()?;
        let h = index.horizon;
        let mut observed = Vec::new();
        let mut truth = Vec::new();
        let mut scale = Vec::new();
        for c in &kept {
            let n = ds.normalized(c.traj);
            if c.start + 1 + h > n.y.nrows() {
                return Err(Error::Usage(format!("forecast for trajectory {} does not match the dataset", c.traj)));
            }
            observed.push(n.y.slice(s![c.start + 1..c.start + 1 + h, ..]));
            truth.push(n.phi.slice(s![c.start + 1..c.start + 1 + h, ..]));
            scale.push(column_std(n.phi.view()));
        }
        let obs_cases: Vec<ForecastCase> =
            ens.iter().zip(&observed).map(|(e, r)| ForecastCase { samples: e.view(), reference: *r }).collect();
        let true_cases: Vec<ForecastCase> =
            ens.iter().zip(&truth).map(|(e, r)| ForecastCase { samples: e.view(), reference: *r }).collect();
        report.cp_forecast = coverage(&obs_cases, levels);
        let growth = forecast_growth(&true_cases, &scale)?;
        report.median_nmae_final = Some(median(&nmae_at(&true_cases, &scale, h - 1)));
        let t: Vec<f64> = (1..=h).map(|k| k as f64).collect();
        write_series_csv(create(&dir.join("fig_nmae_growth.csv"))?, &["t", "nmae", "w95"], &[&t, &growth.nmae, &growth.w95])?;
        report.growth = Some(growth);
        report.horizon = h;
    }

    write_json(&dir.join("metrics.json"), &report)?;
    write_metric_csv(create(&dir.join("metrics.csv"))?, &report.scalars())?;
    let p: Vec<f64> = levels.to_vec();
    let cp = |v: &[(f64, f64)]| -> Vec<f64> {
        levels.iter().map(|l| v.iter().find(|(q, _)| q == l).map_or(f64::NAN, |x| x.1)).collect()
    };
    write_series_csv(
        create(&dir.join("fig_coverage.csv"))?,
        &["p", "onestep", "forecast"],
        &[&p, &cp(&report.cp_onestep), &cp(&report.cp_forecast)],
    )?;
    for (k, v) in report.scalars() {
        println!("{name} {k} = {v:.4}");
    }
    Ok(report)
}

/// Latent-space summary of each checkpoint and the penalty recommendation.
pub fn latent(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<(Vec<(f64, LatentReport)>, LambdaChoice)> {
    if checkpoints.is_empty() {
        return Err(Error::Usage("latent needs at least one --checkpoint".into()));
    }
    let ds = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let trajs = eval_trajectories(&ds);
    let stamps = default_timestamps(cfg.eval.latent_from.min(ds.steps()), ds.steps(), cfg.eval.latent_timestamps);
    let mut reports = Vec::new();
    for path in checkpoints {
        let ckpt = Checkpoint::load(path)?;
        check_compatible(&ckpt, &ds)?;
        let Model::Vi(model) = &ckpt.model else {
            return Err(Error::Usage(format!("{} has no latent variables", path.display())));
        };
        let lambda = ckpt.manifest.config.lambda;
        let seed = derive_seed(cfg.sim.seed, &format!("latent/{lambda}"));
        let a = latent_analysis(model, &ds, &trajs, &stamps, cfg.eval.latent_draws, seed)?;
        for w in &a.report.warnings {
            eprintln!("λ={lambda}: {w}");
        }
        write_json(&dir.join(format!("latent_lambda_{lambda}.json")), &a.report)?;
        let idx: Vec<f64> = (1..=a.report.zeta.len()).map(|i| i as f64).collect();
        write_series_csv(
            create(&dir.join(format!("fig_pca_spectrum_lambda_{lambda}.csv")))?,
            &["i", "eigenvalue", "zeta", "dkl"],
            &[&idx, &a.report.pca_eigs, &a.report.zeta, &a.report.dkl_per_dim],
        )?;
        let mut headers: Vec<String> = (0..model.latent_dim()).map(|i| format!("z_{i}")).collect();
        headers.extend(a.report.param_names.iter().cloned());
        let mut cols: Vec<Vec<f64>> = a.samples.columns().into_iter().map(|c| c.to_vec()).collect();
        cols.extend(a.sample_params.columns().into_iter().map(|c| c.to_vec()));
        let h: Vec<&str> = headers.iter().map(String::as_str).collect();
        let c: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        write_series_csv(create(&dir.join(format!("fig_latent_scatter_lambda_{lambda}.csv")))?, &h, &c)?;
        reports.push((lambda, a.report));
    }
    let table: Vec<(f64, Vec<Vec<f64>>)> = reports.iter().map(|(l, r)| (*l, r.corr_zz.clone())).collect();
    let choice = lambda_selection(&table, cfg.eval.delta)?;
    write_json(&dir.join("lambda_choice.json"), &choice)?;
    match choice.lambda {
        Some(l) => println!("recommended λ* = {l}"),
        None => println!("no λ decorrelates the latent space below δ = {}", choice.delta),
    }
    Ok((reports, choice))
}
