//! Checkpoint file: magic "TUNC", format version, the model config block as
//! flat text, then named arrays (name, rank, extents, little-endian f32).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::{model_section_text, parse_model_section};
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TUNC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = model_section_text(&model.config);
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for entry in model.params.iter() {
        buf.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(entry.name.as_bytes());
        let shape = entry.tensor.shape();
        buf.extend_from_slice(&(shape.rank() as u32).to_le_bytes());
        for &d in shape.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in entry.tensor.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format { path: self.path.clone(), reason: "truncated file".into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Rebuild the model from the embedded config, then overwrite every named
/// parameter from the file. No partial models: any mismatch aborts.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path: path.display().to_string() };
    let fmt = |reason: String| Error::Format { path: path.display().to_string(), reason };

    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let config_len = cur.u32()? as usize;
    let config_text = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|_| fmt("config block is not UTF-8".into()))?;
    let config = parse_model_section(config_text)?;
    let mut model = build_model::<T>(&config)?;

    let count = cur.u32()? as usize;
    if count != model.params.len() {
        return Err(fmt(format!(
            "parameter count {count} does not match the config's {}",
            model.params.len()
        )));
    }
    let mut loaded = vec![false; count];
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| fmt("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = cur.take(4 * numel)?;
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| fmt(format!("unknown parameter `{name}`")))?;
        if model.params.tensor(id).shape().dims() != dims {
            return Err(fmt(format!(
                "parameter `{name}`: shape {:?} does not match config's {}",
                dims,
                model.params.tensor(id).shape()
            )));
        }
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        model.params.set(id, Tensor::from_vec(dims, data)?);
        loaded[id.0] = true;
    }
    if cur.pos != bytes.len() {
        return Err(fmt("trailing bytes after the last parameter".into()));
    }
    if let Some(missing) = loaded.iter().position(|&l| !l) {
        return Err(fmt(format!(
            "parameter `{}` missing from the file",
            model.params.name(crate::init::ParamId(missing))
        )));
    }
    Ok(model)
}
