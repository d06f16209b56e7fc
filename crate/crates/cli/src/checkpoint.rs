//! Checkpoint files: the magic `VIDYN-CKPT1`, a little-endian `u64` manifest
//! length, a JSON manifest, then every parameter as a little-endian `f64` in
//! layout order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vidyn::dyngen::{NormStats, System};
use vidyn::nn::{assign_flat, flatten, layout, GaussianRnn, LayoutEntry, Parameters};
use vidyn::vi_model::{TrainConfig, ViModel};
use vidyn::{Error, Result};

pub const MAGIC: &[u8; 11] = b"VIDYN-CKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Encoder,
    Baseline,
    Vi,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Encoder => "encoder",
            ModelKind::Baseline => "baseline",
            ModelKind::Vi => "vi",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub kind: ModelKind,
    pub system: System,
    pub obs_dim: usize,
    pub forcing_dim: usize,
    pub hidden: usize,
    /// Encoder width, for latent-variable models.
    pub encoder_hidden: Option<usize>,
    pub latent_dim: usize,
    pub sigma_z: Option<f64>,
    pub layout: Vec<LayoutEntry>,
    pub norm_stats: NormStats,
    pub config: TrainConfig,
    pub seed: u64,
    pub iteration: usize,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Rnn(GaussianRnn),
    Vi(ViModel),
}

impl Model {
    fn params(&self) -> &dyn Parameters {
        match self {
            Model::Rnn(m) => m,
            Model::Vi(m) => m,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
}

/// Training-run facts recorded alongside the parameters.
pub struct Provenance<'a> {
    pub system: System,
    pub norm_stats: &'a NormStats,
    pub config: &'a TrainConfig,
    pub iteration: usize,
    pub val_loss: f64,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, model: Model, p: Provenance) -> Self {
        let (obs_dim, forcing_dim, hidden, encoder_hidden, latent_dim, sigma_z) = match &model {
            Model::Rnn(m) => (m.output_dim(), m.input_dim() - m.output_dim(), m.hidden(), None, 0, None),
            Model::Vi(m) => (
                m.obs_dim(),
                m.forcing_dim(),
                m.decoder.hidden(),
                Some(m.encoder.hidden()),
                m.latent_dim(),
                Some(m.sigma_z),
            ),
        };
        let manifest = Manifest {
            version: VERSION,
            kind,
            system: p.system,
            obs_dim,
            forcing_dim,
            hidden,
            encoder_hidden,
            latent_dim,
            sigma_z,
            layout: layout(model.params(), ""),
            norm_stats: p.norm_stats.clone(),
            config: p.config.clone(),
            seed: p.config.seed,
            iteration: p.iteration,
            val_loss: p.val_loss,
        };
        Checkpoint { manifest, model }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serialises");
        let flat = flatten(self.model.params());
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * flat.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| bad("missing magic"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header"));
        }
        let n = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < n {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&rest[..n])?;
        if manifest.version != VERSION {
            return Err(bad(&format!("unsupported version {}", manifest.version)));
        }
        let blob = &rest[n..];
        let total: usize = manifest.layout.iter().map(LayoutEntry::len).sum();
        if blob.len() != 8 * total {
            return Err(bad(&format!("blob holds {} bytes, layout needs {}", blob.len(), 8 * total)));
        }
        let flat: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let m = &manifest;
        let input = m.obs_dim + m.forcing_dim;
        let mut model = match m.kind {
            ModelKind::Encoder | ModelKind::Baseline => Model::Rnn(GaussianRnn::zeros(input, m.hidden, m.obs_dim)),
            ModelKind::Vi => Model::Vi(ViModel::zeros(
                input,
                m.encoder_hidden.ok_or_else(|| bad("latent model without encoder width"))?,
                m.hidden,
                m.latent_dim,
                m.obs_dim,
                m.sigma_z.ok_or_else(|| bad("latent model without prior scale"))?,
            )),
        };
        let expected = layout(model.params(), "");
        if expected != manifest.layout {
            return Err(bad("parameter layout does not match the declared dimensions"));
        }
        match &mut model {
            Model::Rnn(r) => assign_flat(r, &flat)?,
            Model::Vi(v) => assign_flat(v, &flat)?,
        }
        Ok(Checkpoint { manifest, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_bytes(&bytes)
    }

    pub fn rnn(&self) -> Result<&GaussianRnn> {
        match &self.model {
            Model::Rnn(m) => Ok(m),
            Model::Vi(_) => Err(Error::Usage("expected a recurrent checkpoint, got a latent-variable model".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vidyn::rng::stream_rng;

    fn stats() -> NormStats {
        NormStats { y: vec![(0.2, 1.4)], u: vec![] }
    }

    fn vi_checkpoint() -> Checkpoint {
        let mut rng = stream_rng(4, 0);
        let enc = GaussianRnn::init(1, 5, 1, &mut rng);
        let model = ViModel::init(enc, 6, 3, 1.0, &mut rng);
        let cfg = TrainConfig { lambda: 0.1, ..TrainConfig::default() };
        let p = Provenance { system: System::MackeyGlass, norm_stats: &stats(), config: &cfg, iteration: 12, val_loss: -1.234_567_890_123 };
        Checkpoint::new(ModelKind::Vi, Model::Vi(model), p)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = vi_checkpoint();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rnn_round_trip_on_disk() {
        let mut rng = stream_rng(5, 0);
        let m = GaussianRnn::init(2, 4, 1, &mut rng);
        let cfg = TrainConfig::default();
        let p = Provenance { system: System::Vdp, norm_stats: &stats(), config: &cfg, iteration: 0, val_loss: f64::MAX };
        let c = Checkpoint::new(ModelKind::Baseline, Model::Rnn(m), p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.manifest.forcing_dim, 1);
        assert_eq!(back.to_bytes(), fs::read(&path).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = vi_checkpoint().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"VIDYN-CKPT0"), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
    }
}
