//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "PBRIDGE\0" | u32 version | u64 meta_len | meta JSON
//! | u64 n_params | n_params x f64 | sha256 of everything before
//! ```
//!
//! The metadata carries the training config, feature layout, alpha, the
//! energy settings and the statistics and tables the force needs, so a
//! checkpoint alone is enough to sample.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AlphaMode, DriftModel, FeatureSpec, Mlp, NetArch, TrainConfig};
use crate::energies::{EnergyConfig, EnergyForce};
use crate::error::{Error, Result};
use crate::geometry::{AtomTables, DatasetStats};
use crate::sde::NoiseSchedule;

pub const MAGIC: &[u8; 8] = b"PBRIDGE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: NetArch,
    pub params: Vec<f64>,
    pub alpha: f64,
    pub alpha_mode: AlphaMode,
    pub features: FeatureSpec,
    pub schedule: NoiseSchedule,
    pub v_data: f64,
    pub config: TrainConfig,
    pub energy: Option<EnergyConfig>,
    pub stats: Option<DatasetStats>,
    pub stats_fingerprint: Option<String>,
    pub tables: Option<AtomTables>,
    /// Type symbols in channel order (empty for untyped data).
    pub symbols: Vec<String>,
    /// Most common item size in the training data.
    pub m_points: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    arch: NetArch,
    alpha: f64,
    alpha_mode: AlphaMode,
    features: FeatureSpec,
    schedule: NoiseSchedule,
    v_data: f64,
    config: TrainConfig,
    energy: Option<EnergyConfig>,
    stats: Option<String>,
    stats_fingerprint: Option<String>,
    tables: Option<AtomTables>,
    symbols: Vec<String>,
    m_points: usize,
}

impl Checkpoint {
    pub fn from_model(model: &DriftModel, config: &TrainConfig) -> Result<Self> {
        let force = model.force.as_deref();
        let stats = force.and_then(|f| f.stats.as_deref().cloned());
        Ok(Self {
            version: FORMAT_VERSION,
            arch: model.net.arch,
            params: model.net.params.clone(),
            alpha: model.alpha,
            alpha_mode: model.alpha_mode,
            features: model.features.clone(),
            schedule: model.schedule,
            v_data: model.v_data,
            config: config.clone(),
            energy: force.map(EnergyForce::config),
            stats_fingerprint: stats.as_ref().map(DatasetStats::fingerprint),
            stats,
            tables: force.and_then(|f| f.tables.as_deref().cloned()),
            symbols: force
                .and_then(|f| f.tables.as_deref())
                .map(AtomTables::symbols)
                .unwrap_or_default(),
            m_points: 0,
        })
    }

    /// Rebuilds the drift model, including its force.
    pub fn model(&self) -> Result<DriftModel> {
        let net = Mlp::from_params(self.arch, self.params.clone())?;
        let force = match &self.energy {
            Some(cfg) => Some(Arc::new(EnergyForce::from_config(
                cfg,
                self.stats.clone().map(Arc::new),
                self.tables.clone().map(Arc::new),
                self.features.type_channels,
            )?)),
            None => None,
        };
        let mut m = DriftModel::new(net, self.alpha_mode, force, self.schedule, self.features.clone(), self.v_data)?;
        m.alpha = self.alpha;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            arch: self.arch,
            alpha: self.alpha,
            alpha_mode: self.alpha_mode,
            features: self.features.clone(),
            schedule: self.schedule,
            v_data: self.v_data,
            config: self.config.clone(),
            energy: self.energy,
            stats: self.stats.as_ref().map(DatasetStats::to_json),
            stats_fingerprint: self.stats_fingerprint.clone(),
            tables: self.tables.clone(),
            symbols: self.symbols.clone(),
            m_points: self.m_points,
        };
        let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut out = Vec::with_capacity(32 + meta.len() + 8 * self.params.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Integrity("file is truncated".into());
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "checkpoint version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let body_len = bytes.len() - 32;
        if Sha256::digest(&bytes[..body_len])[..] != bytes[body_len..] {
            return Err(Error::Integrity("checksum mismatch (truncated or corrupted)".into()));
        }
        let body = &bytes[..body_len];
        let mut at = 12;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(at..at + n).ok_or_else(short)?;
            at += n;
            Ok(s)
        };
        let meta_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let meta: Meta = serde_json::from_slice(take(meta_len)?)
            .map_err(|e| Error::Integrity(format!("bad metadata: {e}")))?;
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let raw = take(n.checked_mul(8).ok_or_else(short)?)?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if at != body.len() {
            return Err(Error::Integrity("trailing bytes after parameters".into()));
        }
        let stats = meta.stats.as_deref().map(DatasetStats::from_json).transpose()?;
        Ok(Self {
            version,
            arch: meta.arch,
            params,
            alpha: meta.alpha,
            alpha_mode: meta.alpha_mode,
            features: meta.features,
            schedule: meta.schedule,
            v_data: meta.v_data,
            config: meta.config,
            energy: meta.energy,
            stats,
            stats_fingerprint: meta.stats_fingerprint,
            tables: meta.tables,
            symbols: meta.symbols,
            m_points: meta.m_points,
        })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Warns when `config` differs from the one stored here.
    pub fn check_config(&self, config: &TrainConfig) -> bool {
        let same = &self.config == config;
        if !same {
            log::warn!("checkpoint was trained with a different config than the one supplied");
        }
        same
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::train::initial_model;
    use crate::geometry::MarkedPointSet;

    fn ckpt() -> Checkpoint {
        let data = vec![MarkedPointSet::untyped(vec![[0.1, 0.2, 0.3], [1.0, -0.5, 0.25], [0.0, 0.7, -1.0]]).unwrap()];
        let cfg = TrainConfig {
            hidden: 4,
            depth: 1,
            ..TrainConfig::default()
        };
        let mut m = initial_model(&cfg, &data, Some(Arc::new(EnergyForce::riesz(0)))).unwrap();
        m.net.params.iter_mut().enumerate().for_each(|(i, p)| *p += (i as f64).sin() / 3.0);
        m.alpha = 0.1 + 1e-17;
        Checkpoint::from_model(&m, &cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = ckpt();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
        assert_eq!(back.alpha.to_bits(), c.alpha.to_bits());
        assert_eq!(back.model().unwrap().net, c.model().unwrap().net);
    }

    #[test]
    fn truncated_file_fails_integrity() {
        let bytes = ckpt().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn refuses_other_versions() {
        let mut bytes = ckpt().to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"));
    }

    #[test]
    fn config_mismatch_is_reported() {
        let c = ckpt();
        assert!(c.check_config(&c.config));
        let other = TrainConfig {
            seed: 9,
            ..c.config.clone()
        };
        assert!(!c.check_config(&other));
    }
}
