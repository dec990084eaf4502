//! Checkpoint serialization.
//!
//! A checkpoint stores the model configuration followed by every parameter
//! tensor, all little-endian, so a run can be resumed or deployed with the
//! exact bits that training produced:
//!
//! ```text
//! magic    8 bytes  b"MIFCNCK1"
//! version  u32      1
//! T C A B  4 x u32  branches, feature maps, branch layers, head layers
//! dilation A x u32  one per hidden branch layer
//! h        f64      fusion bandwidth
//! alpha    f64      leak slope
//! count    u32      number of parameter tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims (u32 each)
//!   data     f64 each, row-major
//! ```
//!
//! Tensors appear in the model's canonical naming order, and the loader
//! verifies every name and shape against a freshly built skeleton, so a
//! checkpoint cannot silently load into a mismatched architecture.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MifcnParams, ModelConfig};

const MAGIC: &[u8; 8] = b"MIFCNCK1";
const VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize parameters and their configuration into checkpoint bytes.
pub fn encode_checkpoint(params: &MifcnParams, config: &ModelConfig) -> Result<Vec<u8>> {
    params.validate(config)?;
    let named = params.named_tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, config.branches as u32);
    push_u32(&mut buf, config.feature_maps as u32);
    push_u32(&mut buf, config.branch_layers as u32);
    push_u32(&mut buf, config.head_layers as u32);
    for &d in &config.branch_dilations {
        push_u32(&mut buf, d as u32);
    }
    push_f64(&mut buf, config.fusion_h);
    push_f64(&mut buf, config.leak);
    push_u32(&mut buf, named.len() as u32);
    for (name, tensor) in named {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, tensor.shape().len() as u32);
        for &dim in tensor.shape() {
            push_u32(&mut buf, dim as u32);
        }
        for &v in tensor.data() {
            push_f64(&mut buf, v);
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decode checkpoint bytes into parameters and the configuration they were
/// trained with.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(MifcnParams, ModelConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let branches = r.u32()? as usize;
    let feature_maps = r.u32()? as usize;
    let branch_layers = r.u32()? as usize;
    let head_layers = r.u32()? as usize;
    let mut branch_dilations = Vec::with_capacity(branch_layers);
    for _ in 0..branch_layers {
        branch_dilations.push(r.u32()? as usize);
    }
    let fusion_h = r.f64()?;
    let leak = r.f64()?;
    let config = ModelConfig {
        branches,
        feature_maps,
        branch_layers,
        head_layers,
        branch_dilations,
        fusion_h,
        leak,
    };
    config.validate()?;

    // Build a zero-noise skeleton with the right tensor layout, then fill it.
    let mut params = MifcnParams::identity_init_with_noise(&config, 0, 0.0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, t.shape().to_vec()))
        .collect();

    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors but this configuration needs {}",
            count,
            expected.len()
        )));
    }
    let mut loaded: Vec<Vec<f64>> = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let name_len = r.u32()? as usize;
        let got_name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("checkpoint tensor name is not UTF-8".into()))?;
        if got_name != name {
            return Err(Error::Format(format!(
                "checkpoint tensor \"{got_name}\" where \"{name}\" was expected"
            )));
        }
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        if &dims != shape {
            return Err(Error::Format(format!(
                "checkpoint tensor \"{name}\" has shape {dims:?}, expected {shape:?}"
            )));
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        loaded.push(data);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    for (tensor, data) in params.tensors_mut().into_iter().zip(loaded) {
        tensor.data_mut().copy_from_slice(&data);
    }
    params.validate(&config)?;
    Ok((params, config))
}

/// Write a checkpoint to disk.
pub fn save_checkpoint(params: &MifcnParams, config: &ModelConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, config)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a checkpoint from disk.
pub fn load_checkpoint(path: &Path) -> Result<(MifcnParams, ModelConfig)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
