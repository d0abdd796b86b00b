//! NFUS checkpoint format.
//!
//! Layout: `b"NFUS"`, `u32` LE version (1), `u32` LE byte length of a JSON
//! header, the JSON header (topology plus an ordered `{name, shape}`
//! manifest), then every parameter as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FlowModel, FlowTopology, Layer};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"NFUS";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    topology: FlowTopology,
    actnorm_initialized: bool,
    params: Vec<ParamEntry>,
}

pub fn encode_checkpoint<T: Real>(model: &FlowModel<T>) -> Vec<u8> {
    let params = model.params();
    let header = Header {
        topology: model.topology().clone(),
        actnorm_initialized: model.actnorm_initialized(),
        params: params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &params {
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<FlowModel<T>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing NFUS magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + json_len)
        .ok_or_else(|| Error::Checkpoint("truncated JSON header".into()))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = FlowModel::<T>::build(header.topology, 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    if expected.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, topology has {}",
            header.params.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.params) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "manifest entry {} {:?} does not match {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let payload = &bytes[12 + json_len..];
    if payload.len() != 4 * total {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, manifest needs {}",
            payload.len(),
            4 * total
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64));
    for t in model.params_mut() {
        let shape = t.shape().to_vec();
        let n = t.len();
        *t = Tensor::new(shape, values.by_ref().take(n).collect())?;
    }
    for layer in model.layers_mut() {
        if let Layer::ActNorm(a) = layer {
            a.initialized = header.actnorm_initialized;
        }
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &FlowModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<FlowModel<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
