//! Checkpoint layout: `u64` little-endian header length, a JSON header
//! (config, tensor names, shapes, byte offsets, endianness marker), then the
//! tensors as contiguous little-endian `f32` arrays.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const FORMAT: &str = "scratch-ir-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    endianness: String,
    dtype: String,
    config: EncoderConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &EncoderModel<T>, mut out: W) -> Result<()> {
    let mut offset = 0;
    let tensors = model
        .names()
        .iter()
        .zip(model.params())
        .map(|(name, m)| {
            let e = TensorEntry { name: name.clone(), shape: [m.rows(), m.cols()], offset };
            offset += m.len() * 4;
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        endianness: "little".into(),
        dtype: "f32".into(),
        config: model.config().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(8 + json.len() + offset);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for m in model.params() {
        for &v in m.as_slice() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<EncoderModel<f32>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data_start = 8usize.checked_add(hlen).filter(|&s| s <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[8..data_start])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad("unknown format or version"));
    }
    if header.endianness != "little" || header.dtype != "f32" {
        return Err(bad("unsupported endianness or dtype"));
    }
    let data = &bytes[data_start..];
    let mut named = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n = t.shape[0] * t.shape[1];
        let end = t.offset + n * 4;
        if end > data.len() {
            return Err(Error::Checkpoint(format!("tensor {} runs past end of file", t.name)));
        }
        let values = data[t.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((t.name, Matrix::from_vec(t.shape[0], t.shape[1], values)));
    }
    EncoderModel::from_params(header.config, named)
}

pub fn save_checkpoint<T: Scalar>(model: &EncoderModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderModel<f32>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
