//! Versioned binary checkpoints: magic, format version, model kind, a JSON
//! header with the configuration, then the flat parameter array as
//! little-endian f64.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use prefcomp_core::agent::{Agent, AgentConfig};
use prefcomp_core::nn::{BnStats, InputNorm};
use prefcomp_core::reward::{RewardNetConfig, RewardPredictor};
use prefcomp_core::RunRng;
use rand::SeedableRng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"PRFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ModelKind {
    Reward = 1,
    Policy = 2,
}

pub fn encode<H: Serialize>(kind: ModelKind, header: &H, params: &[f64]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("checkpoint headers serialize");
    let mut out = Vec::with_capacity(32 + json.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode<H: DeserializeOwned>(kind: ModelKind, mut bytes: &[u8]) -> std::result::Result<(H, Vec<f64>), String> {
    let mut take = |n: usize| -> std::result::Result<Vec<u8>, String> {
        let mut b = vec![0; n];
        bytes.read_exact(&mut b).map_err(|_| "truncated".to_string())?;
        Ok(b)
    };
    if take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let k = take(1)?[0];
    if k != kind as u8 {
        return Err(format!("model kind {k}, expected {}", kind as u8));
    }
    let hlen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let header = serde_json::from_slice(&take(hlen)?).map_err(|e| e.to_string())?;
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let raw = take(n.checked_mul(8).ok_or("parameter count overflows")?)?;
    let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, params))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).at(&tmp)?;
    f.write_all(bytes).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

fn load<H: DeserializeOwned>(path: &Path, kind: ModelKind) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).at(path)?;
    decode(kind, &bytes).map_err(|msg| Error::Checkpoint { path: path.to_path_buf(), msg })
}

fn mismatch(path: &Path, expected: usize, actual: usize) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: format!("{actual} parameters, configuration needs {expected}") }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RewardHeader {
    config: RewardNetConfig,
    input_shape: [usize; 3],
    bn: Vec<BnStats>,
    norm: InputNorm,
    epochs_trained: usize,
}

pub fn save_reward(path: &Path, p: &RewardPredictor) -> Result<()> {
    let header = RewardHeader {
        config: p.cfg.clone(),
        input_shape: p.net.input_shape,
        bn: p.bn.clone(),
        norm: p.norm,
        epochs_trained: p.epochs_trained,
    };
    write_atomic(path, &encode(ModelKind::Reward, &header, &p.params))
}

/// Restores a trained predictor for inference and fine-tuning; optimizer
/// moments start fresh.
pub fn load_reward(path: &Path) -> Result<RewardPredictor> {
    let (h, params): (RewardHeader, _) = load(path, ModelKind::Reward)?;
    let mut p = RewardPredictor::new(&h.config, h.input_shape, &mut RunRng::seed_from_u64(0))?;
    if p.params.len() != params.len() {
        return Err(mismatch(path, p.params.len(), params.len()));
    }
    p.params = params;
    p.bn = h.bn;
    p.norm = h.norm;
    p.epochs_trained = h.epochs_trained;
    p.trained = true;
    Ok(p)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyHeader {
    config: AgentConfig,
    input_shape: [usize; 3],
    n_adj: usize,
    n_actions: usize,
    max_scale: f64,
    norm: Option<InputNorm>,
    updates: u64,
}

pub fn save_policy(path: &Path, a: &Agent) -> Result<()> {
    let header = PolicyHeader {
        config: a.cfg.clone(),
        input_shape: a.net.input_shape,
        n_adj: a.net.n_adj,
        n_actions: a.net.n_actions,
        max_scale: 1.0 / a.net.adj_scale,
        norm: a.norm,
        updates: a.updates,
    };
    write_atomic(path, &encode(ModelKind::Policy, &header, &a.params))
}

/// Restores the Q-network with an empty replay buffer.
pub fn load_policy(path: &Path) -> Result<Agent> {
    let (h, params): (PolicyHeader, _) = load(path, ModelKind::Policy)?;
    let mut a = Agent::new(&h.config, h.input_shape, h.n_adj, h.n_actions, h.max_scale, &mut RunRng::seed_from_u64(0))?;
    if a.params.len() != params.len() {
        return Err(mismatch(path, a.params.len(), params.len()));
    }
    a.params = params;
    a.sync_target();
    a.norm = h.norm;
    a.updates = h.updates;
    Ok(a)
}
