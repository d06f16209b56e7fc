//! Run configuration: a JSON file with every key optional, overridden by
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use vidyn::dyngen::{GenerateConfig, System};
use vidyn::eval::LlDenominator;
use vidyn::vi_model::TrainConfig;
use vidyn::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub k: usize,
    pub t: usize,
    pub train_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { k: 500, t: 1000, train_count: 400, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Spin-up history length.
    pub tau: usize,
    /// Posterior draws mixed in one-step prediction.
    pub onestep_samples: usize,
    /// Sample paths per forecast.
    pub forecast_samples: usize,
    pub horizon: usize,
    /// Forecast origins.
    pub starts: Vec<usize>,
    /// Coverage levels.
    pub levels: Vec<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tau: 200,
            onestep_samples: 200,
            forecast_samples: 1000,
            horizon: 500,
            starts: vec![300, 350, 400, 450, 500],
            levels: vec![0.8, 0.9, 0.95],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ll_denominator: LlDenominator,
    /// Max off-diagonal latent correlation accepted by the penalty rule.
    pub delta: f64,
    pub latent_draws: usize,
    pub latent_timestamps: usize,
    pub latent_from: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ll_denominator: LlDenominator::Var,
            delta: 0.1,
            latent_draws: 20,
            latent_timestamps: 5,
            latent_from: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: System,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Penalty weights swept by `train vi`.
    pub lambdas: Vec<f64>,
    pub sim: SimConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            system: System::MackeyGlass,
            dataset: None,
            out: None,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            lambdas: vec![0.01, 0.1, 1.0, 10.0],
            sim: SimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reduced Mackey-Glass setting that runs on one core in under two
    /// hours.
    pub fn desk() -> Self {
        RunConfig {
            data: DataConfig { k: 60, t: 600, train_count: 40, seed: 0 },
            train: TrainConfig {
                hidden: 32,
                latent_dim: 6,
                seq_len: 100,
                iterations: 3000,
                val_every: 250,
                ..TrainConfig::default()
            },
            lambdas: vec![0.1, 1.0, 10.0],
            sim: SimConfig {
                tau: 100,
                onestep_samples: 200,
                forecast_samples: 300,
                horizon: 400,
                starts: vec![100, 150, 200],
                ..SimConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            k: self.data.k,
            t: self.data.t,
            train_count: self.data.train_count,
            seed: self.data.seed,
            ..GenerateConfig::for_system(self.system)
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.k == 0 || self.data.t == 0 || self.data.train_count > self.data.k {
            return Err(Error::Range("need k > 0, t > 0 and train_count <= k".into()));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Range("lambdas must be a non-empty list of finite, non-negative values".into()));
        }
        let s = &self.sim;
        if s.tau == 0 || s.onestep_samples == 0 || s.forecast_samples == 0 || s.horizon == 0 {
            return Err(Error::Range("tau, sample counts and horizon must be positive".into()));
        }
        if s.levels.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Range("coverage levels must lie in (0, 1)".into()));
        }
        if let Some(start) = s.starts.iter().find(|&&t| t < s.tau) {
            return Err(Error::Range(format!("forecast origin {start} leaves less than tau = {} of history", s.tau)));
        }
        if let Some(p) = &self.dataset {
            if !p.join("manifest.json").is_file() {
                return Err(Error::Usage(format!("no dataset at {}", p.display())));
            }
        }
        Ok(())
    }
}

fn system(s: &str) -> std::result::Result<System, String> {
    System::from_name(s).ok_or_else(|| format!("unknown system {s:?} (mackey-glass or vdp)"))
}

/// Flags shared by every command. Each overrides the matching key of the
/// JSON config; defaults in brackets are those of a full-scale run.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON config file; any subset of keys, the rest take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Worker threads [1]. Results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Master seed; sets data.seed, train.seed and sim.seed [0].
    #[arg(long)]
    pub seed: Option<u64>,

    /// System: mackey-glass or vdp [mackey-glass] (system).
    #[arg(long, value_parser = system, help_heading = "Data")]
    pub system: Option<System>,
    /// Dataset directory (dataset).
    #[arg(long, help_heading = "Data")]
    pub dataset: Option<PathBuf>,
    /// Output directory (out).
    #[arg(long, help_heading = "Data")]
    pub out: Option<PathBuf>,
    /// Number of trajectories [500] (data.k).
    #[arg(long, help_heading = "Data")]
    pub k: Option<usize>,
    /// Steps per trajectory [1000] (data.t).
    #[arg(long, help_heading = "Data")]
    pub t: Option<usize>,
    /// Training trajectories; the rest validate [400, or 80% of --k] (data.train_count).
    #[arg(long, help_heading = "Data")]
    pub train_count: Option<usize>,

    /// Recurrent width of encoder and decoder [128] (train.hidden).
    #[arg(long, help_heading = "Training")]
    pub hidden: Option<usize>,
    /// Latent dimension [10] (train.latent_dim).
    #[arg(long, help_heading = "Training")]
    pub latent_dim: Option<usize>,
    /// Comma-separated KL penalty weights [0.01,0.1,1,10] (lambdas).
    #[arg(long, value_delimiter = ',', help_heading = "Training")]
    pub lambda: Option<Vec<f64>>,
    /// Prior standard deviation [1] (train.sigma_z).
    #[arg(long, help_heading = "Training")]
    pub sigma_z: Option<f64>,
    /// Training window length in steps [200] (train.seq_len).
    #[arg(long, help_heading = "Training")]
    pub seq_len: Option<usize>,
    /// Windows per minibatch [20] (train.batch).
    #[arg(long, help_heading = "Training")]
    pub batch: Option<usize>,
    /// Latent draws per window during training [25] (train.samples).
    #[arg(long, help_heading = "Training")]
    pub samples: Option<usize>,
    /// Optimiser iterations [30000] (train.iterations).
    #[arg(long, help_heading = "Training")]
    pub iterations: Option<usize>,
    /// Peak learning rate [1e-3] (train.xi_max).
    #[arg(long, help_heading = "Training")]
    pub xi_max: Option<f64>,
    /// Final learning rate [1e-4] (train.xi_min).
    #[arg(long, help_heading = "Training")]
    pub xi_min: Option<f64>,
    /// Global gradient-norm clip, 0 disables [5] (train.clip).
    #[arg(long, help_heading = "Training")]
    pub clip: Option<f64>,
    /// Iterations between validations [500] (train.val_every).
    #[arg(long, help_heading = "Training")]
    pub val_every: Option<usize>,
    /// Fixed validation windows [20] (train.val_windows).
    #[arg(long, help_heading = "Training")]
    pub val_windows: Option<usize>,
    /// Iterations between log rows [100] (train.log_every).
    #[arg(long, help_heading = "Training")]
    pub log_every: Option<usize>,

    /// Spin-up history length [200] (sim.tau).
    #[arg(long, help_heading = "Simulation")]
    pub tau: Option<usize>,
    /// Posterior draws for one-step prediction [200] (sim.onestep_samples).
    #[arg(long, help_heading = "Simulation")]
    pub m: Option<usize>,
    /// Forecast sample paths [1000] (sim.forecast_samples).
    #[arg(long, help_heading = "Simulation")]
    pub ns: Option<usize>,
    /// Forecast horizon in steps [500] (sim.horizon).
    #[arg(long, help_heading = "Simulation")]
    pub horizon: Option<usize>,
    /// Comma-separated forecast origins [300,350,400,450,500] (sim.starts).
    #[arg(long, value_delimiter = ',', help_heading = "Simulation")]
    pub starts: Option<Vec<usize>>,
    /// Comma-separated coverage levels [0.8,0.9,0.95] (sim.levels).
    #[arg(long, value_delimiter = ',', help_heading = "Simulation")]
    pub levels: Option<Vec<f64>>,

    /// Residual scaling in the log-likelihood: var or std [var] (eval.ll_denominator).
    #[arg(long, help_heading = "Evaluation")]
    pub ll_denominator: Option<LlDenominator>,
    /// Correlation threshold of the penalty rule [0.1] (eval.delta).
    #[arg(long, help_heading = "Evaluation")]
    pub delta: Option<f64>,
    /// Draws per posterior in latent analysis [20] (eval.latent_draws).
    #[arg(long, help_heading = "Evaluation")]
    pub latent_draws: Option<usize>,
}

macro_rules! set {
    ($src:expr => $dst:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

impl Overrides {
    /// Config file (or `base`), then flags.
    pub fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => base,
        };
        if let Some(s) = self.seed {
            c.data.seed = s;
            c.train.seed = s;
            c.sim.seed = s;
        }
        set!(self.system => c.system);
        if self.dataset.is_some() {
            c.dataset = self.dataset.clone();
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        if let Some(k) = self.k {
            c.data.k = k;
            if self.train_count.is_none() {
                c.data.train_count = k * 4 / 5;
            }
        }
        set!(self.t => c.data.t);
        set!(self.train_count => c.data.train_count);
        set!(self.hidden => c.train.hidden);
        set!(self.latent_dim => c.train.latent_dim);
        set!(self.lambda => c.lambdas);
        set!(self.sigma_z => c.train.sigma_z);
        set!(self.seq_len => c.train.seq_len);
        set!(self.batch => c.train.batch);
        set!(self.samples => c.train.samples);
        set!(self.iterations => c.train.iterations);
        set!(self.xi_max => c.train.xi_max);
        set!(self.xi_min => c.train.xi_min);
        set!(self.clip => c.train.clip);
        set!(self.val_every => c.train.val_every);
        set!(self.val_windows => c.train.val_windows);
        set!(self.log_every => c.train.log_every);
        set!(self.tau => c.sim.tau);
        set!(self.m => c.sim.onestep_samples);
        set!(self.ns => c.sim.forecast_samples);
        set!(self.horizon => c.sim.horizon);
        set!(self.starts => c.sim.starts);
        set!(self.levels => c.sim.levels);
        set!(self.ll_denominator => c.eval.ll_denominator);
        set!(self.delta => c.eval.delta);
        set!(self.latent_draws => c.eval.latent_draws);
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_full_scale() {
        let c = RunConfig::default();
        assert_eq!((c.train.hidden, c.train.latent_dim, c.train.samples), (128, 10, 25));
        assert_eq!((c.train.batch, c.train.seq_len, c.train.iterations), (20, 200, 30_000));
        assert_eq!((c.sim.tau, c.sim.onestep_samples, c.sim.forecast_samples), (200, 200, 1000));
        assert_eq!(c.lambdas, vec![0.01, 0.1, 1.0, 10.0]);
        assert_eq!((c.data.k, c.data.t, c.data.train_count), (500, 1000, 400));
        c.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"hidden": 16}, "sim": {"horizon": 50}}"#).unwrap();
        let o = Overrides { config: Some(p), horizon: Some(70), seed: Some(3), ..Overrides::default() };
        let c = o.resolve(RunConfig::default()).unwrap();
        assert_eq!(c.train.hidden, 16);
        assert_eq!(c.sim.horizon, 70);
        assert_eq!(c.train.latent_dim, 10);
        assert_eq!((c.data.seed, c.train.seed, c.sim.seed), (3, 3, 3));
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"hiden": 16}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Usage(_))));
    }
}
