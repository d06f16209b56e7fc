use std::io::{Read, Write};

use ndarray::{Array2, Array3};

use super::{Band, ForecastEnsemble, ForecastSummary};
use crate::{Error, Result};

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Format(format!("{other:?}")),
    }
}

fn parse(field: &str) -> Result<f64> {
    field.trim().parse().map_err(|_| Error::Format(format!("not a number: {field:?}")))
}

fn suffix(name: &str, i: usize, d: usize) -> String {
    if d == 1 {
        name.to_string()
    } else {
        format!("{name}_{i}")
    }
}

/// One row per (step, sample): `t, sample_id, y_0, …`. Steps count from 1.
pub fn write_ensemble_csv<W: Write>(w: W, ens: &ForecastEnsemble) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let d = ens.obs_dim();
    let mut header = vec!["t".to_string(), "sample_id".to_string()];
    header.extend((0..d).map(|i| format!("y_{i}")));
    out.write_record(&header).map_err(csv_err)?;
    for k in 0..ens.horizon() {
        for j in 0..ens.n_samples() {
            let mut rec = vec![(k + 1).to_string(), j.to_string()];
            rec.extend((0..d).map(|i| format!("{}", ens.y[[j, k, i]])));
            out.write_record(&rec).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Sample paths `[sample, step, dim]` from a file written by
/// [`write_ensemble_csv`].
pub fn read_ensemble_csv<R: Read>(r: R) -> Result<Array3<f64>> {
    let mut rdr = csv::Reader::from_reader(r);
    let d = rdr.headers().map_err(csv_err)?.len().saturating_sub(2);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let t: usize = rec[0].parse().map_err(|_| Error::Format("bad step".into()))?;
        let j: usize = rec[1].parse().map_err(|_| Error::Format("bad sample id".into()))?;
        let vals = (0..d).map(|i| parse(&rec[2 + i])).collect::<Result<Vec<_>>>()?;
        rows.push((t, j, vals));
    }
    let h = rows.iter().map(|r| r.0).max().unwrap_or(0);
    let n = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if rows.len() != h * n || rows.iter().any(|r| r.0 == 0) {
        return Err(Error::Format("ensemble file is not a full step × sample grid".into()));
    }
    let mut y = Array3::zeros((n, h, d));
    for (t, j, vals) in rows {
        for (i, v) in vals.into_iter().enumerate() {
            y[[j, t - 1, i]] = v;
        }
    }
    Ok(y)
}

/// `t, mean, std, q025, q975, q_lo_<p>, q_hi_<p>, …`, with `_<dim>` suffixes
/// when there is more than one observed dimension.
pub fn write_summary_csv<W: Write>(w: W, s: &ForecastSummary) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let (h, d) = s.mean.dim();
    let mut header = vec!["t".to_string()];
    for i in 0..d {
        for name in ["mean", "std", "q025", "q975"] {
            header.push(suffix(name, i, d));
        }
        for b in &s.bands {
            header.push(suffix(&format!("q_lo_{}", b.p), i, d));
            header.push(suffix(&format!("q_hi_{}", b.p), i, d));
        }
    }
    out.write_record(&header).map_err(csv_err)?;
    for k in 0..h {
        let mut rec = vec![(k + 1).to_string()];
        for i in 0..d {
            for a in [&s.mean, &s.std, &s.q025, &s.q975] {
                rec.push(format!("{}", a[[k, i]]));
            }
            for b in &s.bands {
                rec.push(format!("{}", b.lo[[k, i]]));
                rec.push(format!("{}", b.hi[[k, i]]));
            }
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_summary_csv<R: Read>(r: R) -> Result<ForecastSummary> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let per_dim_bands: Vec<f64> = header
        .iter()
        .filter_map(|h| h.strip_prefix("q_lo_"))
        .map(|rest| rest.split('_').next().unwrap_or(rest))
        .map(parse)
        .collect::<Result<_>>()?;
    let width = header.len().saturating_sub(1);
    let d = header.iter().filter(|h| h.starts_with("mean")).count().max(1);
    let per = 4 + 2 * per_dim_bands.len() / d;
    if width != d * per {
        return Err(Error::Format("unexpected summary columns".into()));
    }
    let levels: Vec<f64> = per_dim_bands[..per_dim_bands.len() / d].to_vec();
    let mut recs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        recs.push(rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?);
    }
    let h = recs.len();
    let mut s = ForecastSummary {
        mean: Array2::zeros((h, d)),
        std: Array2::zeros((h, d)),
        q025: Array2::zeros((h, d)),
        q975: Array2::zeros((h, d)),
        bands: levels.iter().map(|&p| Band { p, lo: Array2::zeros((h, d)), hi: Array2::zeros((h, d)) }).collect(),
    };
    for (k, rec) in recs.iter().enumerate() {
        for i in 0..d {
            let base = i * per;
            s.mean[[k, i]] = rec[base];
            s.std[[k, i]] = rec[base + 1];
            s.q025[[k, i]] = rec[base + 2];
            s.q975[[k, i]] = rec[base + 3];
            for (b, band) in s.bands.iter_mut().enumerate() {
                band.lo[[k, i]] = rec[base + 4 + 2 * b];
                band.hi[[k, i]] = rec[base + 5 + 2 * b];
            }
        }
    }
    Ok(s)
}
