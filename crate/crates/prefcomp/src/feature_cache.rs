//! On-disk observation cache keyed by (clip id, parameter hash). Each entry
//! is a header (magic, shape, dtype) followed by row-major little-endian
//! values.

use std::fs;
use std::path::{Path, PathBuf};

use prefcomp_core::features::Observation;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"PRFFEAT\0";
const DTYPE_F64: u8 = 1;

/// Hex SHA-256 of the JSON form of everything that determines a feature.
pub fn params_hash<T: Serialize + ?Sized>(params: &T) -> String {
    hex(&Sha256::digest(serde_json::to_vec(params).expect("parameters serialize")))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(obs: &Observation) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + 8 * obs.data.len());
    out.extend_from_slice(MAGIC);
    for d in obs.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(DTYPE_F64);
    for v in &obs.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], clip_id: &str) -> std::result::Result<Observation, String> {
    if bytes.len() < 21 || &bytes[..8] != MAGIC {
        return Err("bad header".into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    if bytes[20] != DTYPE_F64 {
        return Err(format!("unsupported dtype {}", bytes[20]));
    }
    let body = &bytes[21..];
    let n = shape.iter().product::<usize>();
    if body.len() != 8 * n {
        return Err(format!("{} value bytes for shape {shape:?}", body.len()));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Observation { shape, data, source_clip_id: clip_id.to_string(), cr_adj_context: None })
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).at(&dir)?;
        Ok(Self { dir })
    }

    pub fn path_for(&self, clip_id: &str, params_hash: &str) -> PathBuf {
        let key = hex(&Sha256::digest(format!("{clip_id}\0{params_hash}").as_bytes()));
        self.dir.join(format!("{key}.feat"))
    }

    pub fn get(&self, clip_id: &str, params_hash: &str) -> Result<Option<Observation>> {
        let path = self.path_for(clip_id, params_hash);
        match fs::read(&path) {
            Ok(bytes) => decode(&bytes, clip_id).map(Some).map_err(|msg| Error::Checkpoint { path, msg }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(Error::Io { path, source }),
        }
    }

    pub fn put(&self, clip_id: &str, params_hash: &str, obs: &Observation) -> Result<()> {
        let path = self.path_for(clip_id, params_hash);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, encode(obs)).at(&tmp)?;
        fs::rename(&tmp, &path).at(&path)
    }

    pub fn get_or_compute(
        &self,
        clip_id: &str,
        params_hash: &str,
        compute: impl FnOnce() -> Result<Observation>,
    ) -> Result<Observation> {
        if let Some(o) = self.get(clip_id, params_hash)? {
            return Ok(o);
        }
        let o = compute()?;
        self.put(clip_id, params_hash, &o)?;
        Ok(o)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs() -> Observation {
        Observation { shape: [2, 3, 1], data: (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(), source_clip_id: "c".into(), cr_adj_context: None }
    }

    #[test]
    fn round_trip_and_layout() {
        let o = obs();
        let b = encode(&o);
        assert_eq!(b.len(), 21 + 48);
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[21..29], &(-1.0f64).to_le_bytes());
        assert_eq!(decode(&b, "c").unwrap(), o);
        assert!(decode(&b[..30], "c").is_err());
    }

    #[test]
    fn cache_computes_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path()).unwrap();
        let h = params_hash(&[1, 2, 3]);
        let mut calls = 0;
        for _ in 0..3 {
            let o = cache
                .get_or_compute("c", &h, || {
                    calls += 1;
                    Ok(obs())
                })
                .unwrap();
            assert_eq!(o, obs());
        }
        assert_eq!(calls, 1);
        assert!(cache.get("c", &params_hash(&[1, 2])).unwrap().is_none());
    }
}
