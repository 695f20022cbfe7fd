//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "FUNLCKPT"
//! version    u32      currently 1
//! header_len u64      byte length of the JSON header
//! header     JSON     {"model": ModelConfig, "funnel": FunnelConfig,
//!                      "params": [{"name": str, "shape": [b, s, d]}, ...]}
//! payload    f64 LE   every parameter's values, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::funnel_ops::FunnelConfig;
use crate::numerics::{ParamStore, Tensor3};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FUNLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    funnel: FunnelConfig,
    params: Vec<ParamEntry>,
}

pub fn encode(state: &ModelState) -> Result<Vec<u8>> {
    let header = Header {
        model: state.config().clone(),
        funnel: state.funnel().clone(),
        params: state
            .params()
            .iter()
            .map(|(_, name, t)| {
                let (b, s, d) = t.shape();
                ParamEntry {
                    name: name.to_string(),
                    shape: [b, s, d],
                }
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * state.params().scalar_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in state.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ModelState> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a funnel checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < header_len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut payload = body[header_len..].chunks_exact(8);
    let mut store = ParamStore::new();
    for entry in header.params {
        let [b, s, d] = entry.shape;
        let n = b * s * d;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let chunk = payload.next().ok_or_else(|| bad("truncated payload"))?;
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        store.register(entry.name, Tensor3::from_vec(b, s, d, values)?)?;
    }
    if payload.next().is_some() || !payload.remainder().is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    ModelState::from_parts(header.model, header.funnel, store)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
