//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "UNETCKPT"
//! version      u16      = 1
//! config       4 × u32  levels, base_channels, in_channels, out_channels
//! count        u32      number of parameter records
//! record*      u16 name length, UTF-8 name, 4 × u32 shape (N, C, H, W),
//!              shape-product × f32 values
//! crc32        u32      IEEE CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{Model, ModelError, UNetConfig};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UNETCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn to_bytes<T: Real>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let c = model.config();
    for v in [c.levels, c.base_channels, c.in_channels, c.out_channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.parameters().len() as u32).to_le_bytes());
    for p in model.parameters() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        for d in p.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    let io = |source| ModelError::Io { path: path.to_path_buf(), source };
    fs::write(&tmp, to_bytes(model)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or(ModelError::Truncated)?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a checkpoint; with `expected`, the embedded config must match it.
pub fn load_bytes<T: Real>(bytes: &[u8], expected: Option<&UNetConfig>) -> Result<Model<T>, ModelError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 2 + 4 {
        return Err(ModelError::Truncated);
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version(version));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let found = UNetConfig { levels: dims[0], base_channels: dims[1], in_channels: dims[2], out_channels: dims[3] };
    if let Some(exp) = expected {
        if *exp != found {
            return Err(ModelError::ConfigMismatch { expected: *exp, found });
        }
    }
    let mut model = Model::<T>::zeros(found)?;
    let count = r.u32()? as usize;
    if count != model.parameters().len() {
        return Err(ModelError::ParameterMismatch {
            name: "<count>".into(),
            detail: format!("{} records, config implies {}", count, model.parameters().len()),
        });
    }
    for p in model.parameters_mut() {
        let len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(len)?).into_owned();
        if name != p.name {
            return Err(ModelError::ParameterMismatch { name, detail: format!("expected {}", p.name) });
        }
        let mut shape = [0usize; 4];
        for d in shape.iter_mut() {
            *d = r.u32()? as usize;
        }
        if shape != p.shape().dims() {
            return Err(ModelError::ParameterMismatch {
                name,
                detail: format!("shape {:?}, config implies {}", shape, p.shape()),
            });
        }
        let raw = r.take(p.value.len() * 4)?;
        let values = raw.chunks_exact(4).map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)).collect();
        p.value = Tensor::from_vec(p.shape(), values)?;
    }
    if r.pos != body.len() {
        return Err(ModelError::ParameterMismatch { name: "<trailer>".into(), detail: "unexpected trailing bytes".into() });
    }
    Ok(model)
}

pub fn load<T: Real>(path: &Path, expected: Option<&UNetConfig>) -> Result<Model<T>, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    load_bytes(&bytes, expected)
}
