//! Versioned weights container: magic, format version, a JSON header
//! describing the architecture and tensor layout, then raw
//! little-endian `f32` payloads in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LTWB";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

/// Write named tensors with an arbitrary serializable model
/// description.
pub fn save_weights<M: Serialize>(
    path: &Path,
    model: &M,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        model: serde_json::to_value(model).map_err(|e| Error::Schema {
            context: "weights header".into(),
            message: e.to_string(),
        })?,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorInfo {
                name: (*n).to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Schema {
        context: "weights header".into(),
        message: e.to_string(),
    })?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header_json).map_err(io)?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// A loaded weights file: deserialized model description plus named
/// tensors in file order.
pub struct LoadedWeights<M> {
    pub model: M,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn load_weights<M: DeserializeOwned>(path: &Path) -> Result<LoadedWeights<M>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::WeightsFormat(msg);

    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a weights file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| bad(format!("invalid header JSON: {e}")))?;

    let mut pos = 16 + header_len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        let end = pos + n * 4;
        if bytes.len() < end {
            return Err(bad(format!("truncated payload for tensor {}", info.name)));
        }
        let data: Vec<f64> = bytes[pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((info.name.clone(), Tensor::from_vec(&info.shape, data)?));
        pos = end;
    }
    if pos != bytes.len() {
        return Err(bad(format!(
            "{} trailing bytes after tensor payloads",
            bytes.len() - pos
        )));
    }
    let model: M = serde_json::from_value(header.model)
        .map_err(|e| bad(format!("model description mismatch: {e}")))?;
    Ok(LoadedWeights { model, tensors })
}
