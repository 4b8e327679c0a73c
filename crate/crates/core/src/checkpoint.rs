//! Versioned single-file checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor listed in the header as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GMENET\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    pub seed: u64,
    pub epoch: usize,
    /// Bits of the scalar type the network was trained in.
    pub precision: u32,
    #[serde(default)]
    pub metrics: serde_json::Value,
    #[serde(default)]
    pub provenance: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    network: &Network<T>,
    epoch: usize,
    metrics: serde_json::Value,
    provenance: serde_json::Value,
) -> Result<()> {
    let store = network.store();
    let entries = |kind, list: &[crate::nn::Named<T>]| -> Vec<TensorEntry> {
        list.iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                kind,
                shape: p.tensor.shape().to_vec(),
            })
            .collect()
    };
    let mut tensors = entries(TensorKind::Param, store.params());
    tensors.extend(entries(TensorKind::Buffer, store.buffers()));
    let header = CheckpointHeader {
        network: network.config.clone(),
        seed: network.seed,
        epoch,
        precision: T::BITS,
        metrics,
        provenance,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(json.len() + 8 * store.num_params() + 32);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in store.params().iter().chain(store.buffers()) {
        for &v in p.tensor.data() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("ckpt.partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<CheckpointHeader> {
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated file"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(|_| bad("truncated file"))?;
    let version = u32::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("format version {version} is not supported (expected {CHECKPOINT_VERSION})")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated file"))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    serde_json::from_slice(&json).map_err(|e| bad(&format!("invalid header: {e}")))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(path, &mut f)
}

/// Rebuilds the network from the stored configuration and fills in every tensor.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Network<T>, CheckpointHeader)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(f);
    let header = read_header(path, &mut r)?;
    let mut net = Network::<T>::new(&header.network, header.seed)?;
    let expected: Vec<(String, Vec<usize>)> = net.signature();
    let stored: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if expected != stored {
        return Err(Error::Checkpoint(format!(
            "{}: tensor layout does not match the stored network configuration",
            path.display()
        )));
    }
    let mut buf = [0u8; 8];
    for entry in &header.tensors {
        let store = net.store_mut();
        let t = match entry.kind {
            TensorKind::Param => store.by_name_mut(&entry.name),
            TensorKind::Buffer => store.buffer_by_name_mut(&entry.name),
        }
        .ok_or_else(|| Error::Checkpoint(format!("{}: unknown tensor {}", path.display(), entry.name)))?;
        for v in t.data_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("{}: truncated tensor data", path.display())))?;
            *v = T::from_f64(f64::from_le_bytes(buf));
        }
    }
    if r.read(&mut buf).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Checkpoint(format!("{}: trailing bytes after tensor data", path.display())));
    }
    Ok((net, header))
}
