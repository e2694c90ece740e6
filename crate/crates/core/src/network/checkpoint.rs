//! Binary checkpoints: `FUFTCKPT`, a little-endian u64 header length, a JSON
//! header, then every tensor as little-endian f32 in header order.

use super::config::NetworkConfig;
use super::params::{BatchNorm, ConvLayer, NetworkParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FUFTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    name: String,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: NetworkConfig,
    layers: Vec<LayerHeader>,
    tensors: Vec<TensorHeader>,
}

/// Every stored tensor of the network as `(name, shape, values)`, in file order.
pub fn named_tensors<T: Scalar>(p: &NetworkParams<T>) -> Vec<(String, Vec<usize>, &[T])> {
    let mut out = Vec::new();
    for l in p.layers() {
        out.push((format!("{}/weight", l.name), l.weight_shape().to_vec(), l.weight.as_slice()));
        out.push((format!("{}/bias", l.name), vec![l.out_channels], l.bias.as_slice()));
        if let Some(bn) = &l.bn {
            for (tag, v) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                out.push((format!("{}/{tag}", l.name), vec![l.out_channels], v.as_slice()));
            }
        }
    }
    out
}

pub fn to_bytes<T: Scalar>(p: &NetworkParams<T>) -> Result<Vec<u8>> {
    let tensors = named_tensors(p);
    let header = Header {
        format_version: FORMAT_VERSION,
        config: p.config().clone(),
        layers: p.layers().iter().map(|l| LayerHeader { name: l.name.clone(), trainable: l.trainable }).collect(),
        tensors: tensors.iter().map(|(n, s, _)| TensorHeader { name: n.clone(), shape: s.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|t| t.2.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, vals) in tensors {
        for v in vals {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<NetworkParams<T>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = LittleEndian::read_u64(&bytes[8..16]) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    let mut params = super::params::build_network::<T>(&header.config, 0)?;
    let expected: Vec<TensorHeader> = named_tensors(&params)
        .into_iter()
        .map(|(name, shape, _)| TensorHeader { name, shape })
        .collect();
    if expected != header.tensors {
        return Err(bad("tensor table does not match the stored configuration"));
    }
    let mut cursor = &bytes[16 + hlen..];
    let mut read = |n: usize| -> Result<Vec<T>> {
        if cursor.len() < 4 * n {
            return Err(bad("truncated payload"));
        }
        let (head, rest) = cursor.split_at(4 * n);
        cursor = rest;
        Ok(head.chunks_exact(4).map(|c| T::lit(LittleEndian::read_f32(c) as f64)).collect())
    };
    let mut layers = Vec::with_capacity(params.layers().len());
    for (l, lh) in params.layers().iter().zip(&header.layers) {
        let weight = read(l.weight.len())?;
        let bias = read(l.bias.len())?;
        let bn = match &l.bn {
            Some(b) => {
                let c = b.gamma.len();
                Some(BatchNorm { gamma: read(c)?, beta: read(c)?, running_mean: read(c)?, running_var: read(c)? })
            }
            None => None,
        };
        layers.push(ConvLayer { weight, bias, bn, trainable: lh.trainable, name: lh.name.clone(), ..l.clone() });
    }
    if !cursor.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    if header.layers.len() != params.layers().len() {
        return Err(bad("layer table does not match the stored configuration"));
    }
    params = NetworkParams::from_parts(header.config, layers)?;
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(p: &NetworkParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(p)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<NetworkParams<T>> {
    let path = path.as_ref();
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
