//! Versioned checkpoint files.
//!
//! Layout: magic "FLED", u32 little-endian version = 1, u32 metadata length,
//! UTF-8 JSON metadata (architecture config, parameter census, training
//! stage), then the parameter blobs as raw little-endian f32 in census order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_census, ArchConfig, Model, ModelParams, NetKind};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FLED";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub kind: NetKind,
    pub census: Vec<(String, Vec<usize>)>,
    pub stage: String,
    pub config_digest: String,
}

pub fn save(path: &Path, model: &Model<f32>, stage: &str) -> Result<()> {
    let census = param_census(&model.cfg, model.kind);
    if !model.params.matches_census(&census) {
        return Err(Error::Checkpoint("parameters do not match the census".into()));
    }
    let meta = CheckpointMeta {
        arch: model.cfg.clone(),
        kind: model.kind,
        census,
        stage: stage.to_string(),
        config_digest: model.cfg.digest(),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    for (_, t) in model.params.entries() {
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + meta_len {
        return Err(fail("truncated metadata"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..12 + meta_len])?;
    let mut offset = 12 + meta_len;
    let mut entries = Vec::with_capacity(meta.census.len());
    for (name, shape) in &meta.census {
        let n: usize = shape.iter().product();
        if bytes.len() < offset + 4 * n {
            return Err(fail(&format!("truncated blob for {name}")));
        }
        let data: Vec<f32> = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 4 * n;
        entries.push((name.clone(), Tensor::new(shape.clone(), data)));
    }
    if offset != bytes.len() {
        return Err(fail("trailing bytes after parameter blobs"));
    }
    let params = ModelParams::from_entries(entries);
    Ok((Model::from_params(meta.arch.clone(), meta.kind, params), meta))
}

/// Hex sha256 of a checkpoint file; used for reproducibility assertions.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [NetKind::Teacher, NetKind::Generator, NetKind::Inverter, NetKind::Adapter] {
            let model = Model::<f32>::init(ArchConfig::micro(), kind, 42);
            let path = dir.path().join(format!("{kind:?}.fled"));
            save(&path, &model, "test").unwrap();
            let (loaded, meta) = load(&path).unwrap();
            assert_eq!(meta.kind, kind);
            assert_eq!(meta.stage, "test");
            assert_eq!(loaded.params.entries().len(), model.params.entries().len());
            for ((n1, t1), (n2, t2)) in
                model.params.entries().iter().zip(loaded.params.entries())
            {
                assert_eq!(n1, n2);
                assert_eq!(t1.data(), t2.data(), "parameter {n1} must round-trip bit-exactly");
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fled");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load(&path).is_err());
    }
}
