//! Dataset directories: `manifest.json` plus one `traj_%04d.bin` per
//! trajectory holding raw-unit columns `(y…, u…, φ…)`.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::dataset::{normalize_dataset, Dataset, NormStats, System, Trajectory};
use super::params::SystemParams;
use crate::{Error, Result};

pub const TRAJ_MAGIC: &[u8; 10] = b"VIDYN-TRJ1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    system: String,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "T")]
    t: usize,
    dt_fine: f64,
    stride: usize,
    sigma_eps: f64,
    seed: u64,
    norm_stats: NormStats,
    train_count: usize,
    val_count: usize,
    params: Vec<SystemParams>,
}

fn traj_path(dir: &Path, k: usize) -> std::path::PathBuf {
    dir.join(format!("traj_{k:04}.bin"))
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        system: ds.system.name().to_string(),
        k: ds.len(),
        t: ds.steps(),
        dt_fine: ds.dt_fine,
        stride: ds.stride,
        sigma_eps: ds.noise_sigma,
        seed: ds.seed,
        norm_stats: ds.norm_stats.clone(),
        train_count: ds.split.train.len(),
        val_count: ds.split.val.len(),
        params: ds.trajectories.iter().map(|t| t.params).collect(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;

    for (k, t) in ds.trajectories.iter().enumerate() {
        let cols = t.y.ncols() + t.u.ncols() + t.phi.ncols();
        let rows = t.len();
        let mut w = BufWriter::new(fs::File::create(traj_path(dir, k))?);
        w.write_all(TRAJ_MAGIC)?;
        w.write_all(&(cols as u32).to_le_bytes())?;
        w.write_all(&(rows as u32).to_le_bytes())?;
        for r in 0..rows {
            for a in [&t.y, &t.u, &t.phi] {
                for &v in a.row(r) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes"))
}

fn read_block(path: &Path) -> Result<Array2<f64>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let header = TRAJ_MAGIC.len() + 8;
    if buf.len() < header || &buf[..TRAJ_MAGIC.len()] != TRAJ_MAGIC {
        return Err(Error::Format(format!("{}: bad trajectory magic", path.display())));
    }
    let cols = read_u32(&buf, TRAJ_MAGIC.len()) as usize;
    let rows = read_u32(&buf, TRAJ_MAGIC.len() + 4) as usize;
    let body = &buf[header..];
    if body.len() != rows * cols * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} values, found {} bytes",
            path.display(),
            rows * cols,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let system = System::from_name(&manifest.system)
        .ok_or_else(|| Error::Format(format!("unknown system {:?}", manifest.system)))?;
    if manifest.params.len() != manifest.k {
        return Err(Error::Format("params length differs from K".into()));
    }
    let (d, nu) = (system.obs_dim(), system.forcing_dim());
    let dt_sample = manifest.dt_fine * manifest.stride as f64;
    let mut trajectories = Vec::with_capacity(manifest.k);
    for (k, params) in manifest.params.iter().enumerate() {
        let block = read_block(&traj_path(dir, k))?;
        if block.ncols() != 2 * d + nu || block.nrows() != manifest.t + 1 {
            return Err(Error::Format(format!(
                "trajectory {k}: shape {:?} does not match manifest",
                block.dim()
            )));
        }
        trajectories.push(Trajectory {
            y: block.slice(s![.., ..d]).to_owned(),
            u: block.slice(s![.., d..d + nu]).to_owned(),
            phi: block.slice(s![.., d + nu..]).to_owned(),
            params: *params,
            dt_sample,
        });
    }
    let ds = normalize_dataset(
        system,
        trajectories,
        manifest.train_count,
        manifest.seed,
        manifest.sigma_eps,
        manifest.dt_fine,
        manifest.stride,
    )?;
    if ds.norm_stats != manifest.norm_stats {
        return Err(Error::Format("stored norm_stats disagree with the training split".into()));
    }
    Ok(ds)
}
