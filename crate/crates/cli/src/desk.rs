//! The desk-scale pipeline and its acceptance table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use vidyn::eval::{LambdaChoice, LatentReport, MetricsReport};
use vidyn::{Error, Result};

use crate::checkpoint::ModelKind;
use crate::commands;
use crate::config::RunConfig;

/// Outcome of one acceptance criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Penalty weight whose model is forecast and analysed: 1 if swept,
/// otherwise the closest value.
pub fn primary_lambda(lambdas: &[f64]) -> f64 {
    lambdas.iter().copied().min_by(|a, b| (a - 1.0).abs().total_cmp(&(b - 1.0).abs())).unwrap_or(1.0)
}

fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_str(&text)?)
}

/// Run generate, encoder, latent sweep, baseline, forecasts, one-step
/// predictions, evaluation and latent analysis under `cfg.out`.
pub fn reproduce(cfg: &RunConfig) -> Result<Vec<Criterion>> {
    let root = cfg.out.clone().ok_or_else(|| Error::Usage("--out is required".into()))?;
    fs::create_dir_all(&root)?;
    let rec = RunConfig { out: Some(PathBuf::from(".")), dataset: None, ..cfg.clone() };
    fs::write(root.join("config.json"), rec.to_json())?;
    let at = |p: &str| Some(root.join(p));
    let step = |name: &str, clock: &mut Instant| {
        eprintln!("[{:>7.1} s] {name}", clock.elapsed().as_secs_f64());
    };
    let mut clock = Instant::now();

    let data = root.join("data");
    commands::generate(&RunConfig { out: Some(data.clone()), ..cfg.clone() })?;
    let base = RunConfig { dataset: Some(data), ..cfg.clone() };
    step("dataset", &mut clock);

    let encoder = commands::train_recurrent(&RunConfig { out: at("encoder"), ..base.clone() }, ModelKind::Encoder)?;
    step("encoder", &mut clock);
    let vi = commands::train_latent(&RunConfig { out: at("vi"), ..base.clone() }, &encoder)?;
    step("latent models", &mut clock);
    let baseline = commands::train_recurrent(&RunConfig { out: at("baseline"), ..base.clone() }, ModelKind::Baseline)?;
    step("baseline", &mut clock);

    let lam = primary_lambda(&cfg.lambdas);
    let idx = cfg.lambdas.iter().position(|l| *l == lam).expect("primary lambda is swept");
    let models: [(&str, &PathBuf); 2] = [("vi", &vi[idx]), ("baseline", &baseline)];
    for (name, ckpt) in models {
        let f = root.join("forecast").join(name);
        let o = root.join("onestep").join(name);
        commands::forecast(&RunConfig { out: Some(f.clone()), ..base.clone() }, ckpt)?;
        commands::onestep(&RunConfig { out: Some(o.clone()), ..base.clone() }, ckpt)?;
        commands::evaluate(&RunConfig { out: at(&format!("eval/{name}")), ..base.clone() }, Some(&f), Some(&o), name)?;
        step(&format!("{name} simulation and metrics"), &mut clock);
    }
    commands::latent(&RunConfig { out: at("latent"), ..base.clone() }, &vi)?;
    step("latent analysis", &mut clock);

    let table = acceptance(&root, cfg)?;
    write_table(&root, &table)?;
    Ok(table)
}

fn active_dims(r: &LatentReport) -> usize {
    r.dkl_per_dim.iter().filter(|k| **k > 0.1).count()
}

/// Criteria 5-8 recomputed from the files of a finished run.
pub fn acceptance(root: &Path, cfg: &RunConfig) -> Result<Vec<Criterion>> {
    let vi: MetricsReport = read(&root.join("eval/vi/metrics.json"))?;
    let rnn: MetricsReport = read(&root.join("eval/baseline/metrics.json"))?;
    let lam = primary_lambda(&cfg.lambdas);
    let lat: LatentReport = read(&root.join(format!("latent/latent_lambda_{lam}.json")))?;
    let choice: LambdaChoice = read(&root.join("latent/lambda_choice.json"))?;
    let mut out = Vec::new();

    let (a, b) = (vi.median_nmae_final.unwrap_or(f64::NAN), rnn.median_nmae_final.unwrap_or(f64::NAN));
    out.push(Criterion {
        id: 5,
        name: "forecast accuracy versus baseline".into(),
        passed: a <= 0.8 * b,
        detail: format!("median NMAE at step {}: latent {a:.4}, baseline {b:.4}, ratio {:.3} (need <= 0.8)", vi.horizon, a / b),
    });

    let zeta3 = lat.zeta.get(2).copied().unwrap_or(f64::NAN);
    let active = active_dims(&lat);
    let best: Vec<f64> = (0..lat.param_names.len())
        .map(|j| lat.corr_z_param.iter().map(|row| row[j].abs()).fold(0.0, f64::max))
        .collect();
    let corr_ok = best.iter().all(|c| *c >= 0.7);
    let names: Vec<String> = lat.param_names.iter().zip(&best).map(|(n, c)| format!("{n} {c:.3}")).collect();
    out.push(Criterion {
        id: 6,
        name: "latent identifiability".into(),
        passed: zeta3 >= 0.8 && (2..=4).contains(&active) && corr_ok,
        detail: format!(
            "zeta_3 {zeta3:.3} (need >= 0.8); active dims {active} (need 2-4); best |corr| {} (need >= 0.7)",
            names.join(", ")
        ),
    });

    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for p in [0.8, 0.9, 0.95] {
        let cp = vi.cp_onestep.iter().find(|(q, _)| (*q - p).abs() < 1e-12).map_or(f64::NAN, |x| x.1);
        worst = worst.max((cp - p).abs());
        parts.push(format!("CP_{p} {cp:.3}"));
    }
    out.push(Criterion {
        id: 7,
        name: "one-step coverage".into(),
        passed: worst <= 0.05,
        detail: format!("{} (need within 0.05 of nominal)", parts.join(", ")),
    });

    let maxes: Vec<f64> = choice.max_offdiag.iter().map(|r| r.1).collect();
    let monotone = maxes.windows(2).all(|w| w[1] <= w[0]);
    let table: Vec<String> = choice.max_offdiag.iter().map(|(l, m)| format!("λ={l}: {m:.3}")).collect();
    out.push(Criterion {
        id: 8,
        name: "penalty selection".into(),
        passed: choice.lambda.is_some_and(f64::is_finite) && monotone,
        detail: format!(
            "λ* = {}; max off-diagonal |corr| {} (need finite λ* and non-increasing)",
            choice.lambda.map_or("none".into(), |l| l.to_string()),
            table.join(", ")
        ),
    });
    Ok(out)
}

pub fn render(table: &[Criterion]) -> String {
    let mut s = String::new();
    for c in table {
        let _ = writeln!(s, "criterion {} [{}] {}: {}", c.id, if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    s
}

fn write_table(root: &Path, table: &[Criterion]) -> Result<()> {
    let mut json = serde_json::to_string_pretty(table)?;
    json.push('\n');
    fs::write(root.join("acceptance.json"), json)?;
    fs::write(root.join("acceptance.txt"), render(table))?;
    Ok(())
}
