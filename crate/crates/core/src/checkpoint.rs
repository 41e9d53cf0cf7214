//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic `GSCKPT01`, little-endian `u64` header length, a JSON
//! header, then the little-endian `f64` payload. The header lists every tensor
//! with its byte offset into the payload, momentum buffers included.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::tensor::{Parameter, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GSCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENTUM_SUFFIX: &str = "#momentum";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Number of completed optimizer steps.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub network: NetworkConfig,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub rng: RngState,
}

pub fn save_checkpoint(path: &Path, network: &Network, rng: RngState) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, t: &Tensor| {
        let offset = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "float64".into(),
            offset,
            nbytes: payload.len() - offset,
        });
    };
    for p in network.parameters() {
        push(p.name.clone(), p.value());
        push(format!("{}{MOMENTUM_SUFFIX}", p.name), p.momentum());
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        network: network.config().clone(),
        rng,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", header.version)));
    }
    let payload = &bytes[16 + len..];
    let mut values = Vec::new();
    let mut momenta = std::collections::HashMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if e.dtype != "float64" || e.nbytes != n * 8 {
            return Err(Error::format(path, format!("tensor {} has bad dtype or size", e.name)));
        }
        let raw = payload
            .get(e.offset..e.offset + e.nbytes)
            .ok_or_else(|| Error::format(path, format!("tensor {} out of bounds", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        match e.name.strip_suffix(MOMENTUM_SUFFIX) {
            Some(base) => {
                momenta.insert(base.to_string(), t);
            }
            None => values.push((e.name.clone(), t)),
        }
    }
    let params = values
        .into_iter()
        .map(|(name, v)| match momenta.remove(&name) {
            Some(m) => Parameter::with_momentum(name, v, m),
            None => Ok(Parameter::new(name, v)),
        })
        .collect::<Result<Vec<_>>>()?;
    let network = Network::from_parameters(header.network, params)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint {
        network,
        rng: header.rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = NetworkConfig {
            width: 2,
            depth: 1,
            seed: 3,
            ..Default::default()
        };
        let net = Network::build(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &net, RngState { seed: 3, step: 7 }).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.rng, RngState { seed: 3, step: 7 });
        assert_eq!(back.network.parameters(), net.parameters());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"NOTACKPT00000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
