//! Binary checkpoint: the 8-byte magic, a little-endian u32 header length, a
//! JSON header, then every tensor's values as little-endian f64.

use super::{MacNetwork, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MACCNN01";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    state: Option<serde_json::Value>,
}

/// A network plus whatever training state was stored alongside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: MacNetwork,
    pub state: Option<serde_json::Value>,
}

const MOMENTUM_SUFFIX: &str = "#momentum";

/// Writes parameters and momentum buffers. The file is written to a
/// temporary sibling first and renamed into place.
pub fn save_checkpoint(path: &Path, net: &MacNetwork, state: Option<&serde_json::Value>) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut add = |name: String, t: &Tensor, tensors: &mut Vec<TensorEntry>| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, p) in net.params().iter() {
        add(name.to_string(), &p.value, &mut tensors);
        add(format!("{name}{MOMENTUM_SUFFIX}"), &p.momentum_buffer, &mut tensors);
    }
    let header = serde_json::to_vec(&Header {
        config: net.config().clone(),
        tensors,
        state: state.cloned(),
    })?;
    let mut bytes = Vec::with_capacity(12 + header.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let payload = &bytes[12 + hlen..];

    let mut net = MacNetwork::build(&header.config, 0).map_err(|e| bad(&e.to_string()))?;
    let mut params = net.params().clone();
    for entry in &header.tensors {
        let (base, momentum) = match entry.name.strip_suffix(MOMENTUM_SUFFIX) {
            Some(b) => (b, true),
            None => (entry.name.as_str(), false),
        };
        let id = params
            .index_of(base)
            .ok_or_else(|| bad(&format!("unknown tensor {}", entry.name)))?;
        let numel: usize = entry.shape.iter().product();
        let raw = payload
            .get(entry.offset..entry.offset + numel * 8)
            .ok_or_else(|| bad(&format!("truncated tensor {}", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&entry.shape, data).map_err(|e| bad(&e.to_string()))?;
        let p = params.get_mut(id);
        if t.shape() != p.value.shape() {
            return Err(bad(&format!("shape mismatch for {}", entry.name)));
        }
        if momentum {
            p.momentum_buffer = t;
        } else {
            p.value = t;
        }
    }
    net.replace_params(params)?;
    Ok(Checkpoint {
        network: net,
        state: header.state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut net = MacNetwork::build(&NetworkConfig::default(), 11).unwrap();
        net.params_mut().get_mut(0).momentum_buffer.data_mut()[0] = 0.125;
        let state = serde_json::json!({"epoch": 3});
        save_checkpoint(&path, &net, Some(&state)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.network, net);
        assert_eq!(ck.state, Some(state));
    }

    #[test]
    fn corrupt_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"MACCNN01\xff\xff\x00\x00{").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Data(_))));
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Data(_))));
    }
}
