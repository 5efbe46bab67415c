//! Binary state files.
//!
//! Layout (little-endian): 8-byte magic, `u32` schema version, `u32` role code,
//! `u64` dim, `u64` hash seed, then `dim` `f64` weights. The training log goes
//! to a JSON sidecar at `<path>.json`.

use super::{EpochLoss, ReasonerError, ReasonerRole, ReasonerState};
use crate::data::{read_json, write_json, DataError, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"AURASTAT";
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 8;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    role: ReasonerRole,
    dim: usize,
    hash_seed: u64,
    train_log: Vec<EpochLoss>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl ReasonerState {
    pub fn save(&self, path: &Path) -> Result<(), ReasonerError> {
        self.check()?;
        let mut buf = Vec::with_capacity(HEADER_LEN + 8 * self.dim);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.role.code().to_le_bytes());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        buf.extend_from_slice(&self.hash_seed.to_le_bytes());
        for w in &self.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| DataError::io(path, e))?;
        write_json(
            &sidecar_path(path),
            &Sidecar {
                role: self.role,
                dim: self.dim,
                hash_seed: self.hash_seed,
                train_log: self.train_log.clone(),
            },
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReasonerError> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        let corrupt = |message: String| ReasonerError::CorruptState {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt("not a reasoner state file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != SCHEMA_VERSION {
            return Err(ReasonerError::SchemaVersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let role = ReasonerRole::from_code(u32_at(12))
            .ok_or_else(|| corrupt(format!("unknown role code {}", u32_at(12))))?;
        let dim = u64_at(16) as usize;
        let hash_seed = u64_at(24);
        if bytes.len() != HEADER_LEN + 8 * dim {
            return Err(corrupt(format!(
                "header declares dim {dim} but file holds {} bytes of weights",
                bytes.len() - HEADER_LEN
            )));
        }
        let weights: Vec<f64> = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(corrupt("non-finite weight".into()));
        }
        let sidecar: Sidecar = read_json(&sidecar_path(path))?;
        if sidecar.role != role || sidecar.dim != dim || sidecar.hash_seed != hash_seed {
            return Err(corrupt("sidecar disagrees with binary header".into()));
        }
        let state = ReasonerState {
            weights,
            dim,
            hash_seed,
            role,
            train_log: sidecar.train_log,
        };
        state.check()?;
        Ok(state)
    }
}
