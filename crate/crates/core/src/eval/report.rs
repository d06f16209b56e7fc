use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Growth;
use crate::Result;

/// Everything `evaluate` reports for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub e_mu: Option<f64>,
    pub e_sigma: Option<f64>,
    pub ll: Option<f64>,
    pub nll: Option<f64>,
    /// `(p, CP_p)` from one-step predictive intervals.
    pub cp_onestep: Vec<(f64, f64)>,
    /// `(p, CP_p)` from forecast ensembles.
    pub cp_forecast: Vec<(f64, f64)>,
    pub growth: Option<Growth>,
    /// Median over cases of the normalised error at the last forecast step.
    pub median_nmae_final: Option<f64>,
    pub n_test: usize,
    pub horizon: usize,
}

impl MetricsReport {
    /// Flat `(metric, value)` pairs for the scalar entries.
    pub fn scalars(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (name, v) in [
            ("e_mu", self.e_mu),
            ("e_sigma", self.e_sigma),
            ("ll", self.ll),
            ("nll", self.nll),
            ("median_nmae_final", self.median_nmae_final),
        ] {
            if let Some(v) = v {
                out.push((name.to_string(), v));
            }
        }
        for (p, c) in &self.cp_onestep {
            out.push((format!("cp_onestep_{p}"), *c));
        }
        for (p, c) in &self.cp_forecast {
            out.push((format!("cp_forecast_{p}"), *c));
        }
        out.push(("n_test".into(), self.n_test as f64));
        out.push(("horizon".into(), self.horizon as f64));
        out
    }
}

pub fn write_metric_csv<W: Write>(w: W, rows: &[(String, f64)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["metric", "value"]).map_err(into_io)?;
    for (k, v) in rows {
        out.write_record([k.as_str(), &format!("{v}")]).map_err(into_io)?;
    }
    out.flush()?;
    Ok(())
}

/// Columns of equal length under the given headers, one row per index.
pub fn write_series_csv<W: Write>(w: W, headers: &[&str], columns: &[&[f64]]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(headers).map_err(into_io)?;
    let n = columns.iter().map(|c| c.len()).max().unwrap_or(0);
    for r in 0..n {
        let rec: Vec<String> = columns.iter().map(|c| c.get(r).map_or(String::new(), |v| format!("{v}"))).collect();
        out.write_record(&rec).map_err(into_io)?;
    }
    out.flush()?;
    Ok(())
}

fn into_io(e: csv::Error) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => crate::Error::Io(e),
        other => crate::Error::Format(format!("{other:?}")),
    }
}
