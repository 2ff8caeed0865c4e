//! Binary checkpoint format.
//!
//! ```text
//! "CNPM" | u32 LE version (1) | u64 LE descriptor length L | L bytes UTF-8 JSON
//! then, per parametric layer in declaration order, little-endian f32 blobs:
//!   conv   weights [out][in][kh][kw], bias [out]
//!   linear weights [out][in],         bias [out]
//! ```
//!
//! Flatten is channel-major (`[C,H,W]`), recorded in the descriptor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, LayerParams, ModelState};
use crate::error::{Error, Result};
use crate::numkernel::{LayerSpec, Tensor};

pub const MAGIC: [u8; 4] = *b"CNPM";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    class_names: Vec<String>,
    seed: u64,
    flatten_order: String,
}

pub fn to_bytes(model: &ModelState) -> Result<Vec<u8>> {
    let arch = model.architecture();
    let descriptor = serde_json::to_vec(&Descriptor {
        input_shape: arch.input_shape,
        layers: arch.layers.clone(),
        class_names: arch.class_names.clone(),
        seed: model.seed(),
        flatten_order: "chw".into(),
    })?;
    let floats: usize = model.tensors().iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(16 + descriptor.len() + 4 * floats);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u64).to_le_bytes());
    out.extend_from_slice(&descriptor);
    for t in model.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let len = u64::from_le_bytes(r.take(8, "descriptor length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Truncated("descriptor length overflow".into()))?;
    let desc: Descriptor = serde_json::from_slice(r.take(len, "descriptor")?)
        .map_err(|e| Error::Descriptor(e.to_string()))?;
    if desc.flatten_order != "chw" {
        return Err(Error::Descriptor(format!(
            "unsupported flatten order {:?}",
            desc.flatten_order
        )));
    }
    let arch = Architecture {
        input_shape: desc.input_shape,
        layers: desc.layers,
        class_names: desc.class_names,
    };
    arch.validate()?;
    let mut params = Vec::with_capacity(arch.layers.len());
    for layer in &arch.layers {
        let p = match layer.param_shapes() {
            None => None,
            Some((wshape, bshape)) => {
                let weights = read_tensor(&mut r, wshape)?;
                let bias = read_tensor(&mut r, bshape)?;
                Some(LayerParams { weights, bias })
            }
        };
        params.push(p);
    }
    if r.pos != bytes.len() {
        return Err(Error::Descriptor(format!(
            "{} trailing bytes after the last parameter blob",
            bytes.len() - r.pos
        )));
    }
    ModelState::from_parts(arch, params, desc.seed)
}

fn read_tensor(r: &mut Reader<'_>, shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let raw = r.take(n * 4, "parameter blob")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

/// Writes the checkpoint and returns its size in bytes.
pub fn save_checkpoint(model: &ModelState, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Size the checkpoint of `model` would occupy on disk.
pub fn storage_bytes(model: &ModelState) -> Result<u64> {
    to_bytes(model).map(|b| b.len() as u64)
}
