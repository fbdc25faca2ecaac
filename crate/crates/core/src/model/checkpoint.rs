//! Binary checkpoint files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "RSEGCKPT"
//! version      u32      = 1
//! config_len   u32      byte length of the JSON model config that follows
//! config       [u8]     ModelConfig as JSON
//! n_params     u32
//! per parameter, in registry order:
//!   name_len   u32
//!   name       [u8]     UTF-8
//!   frozen     u8       0 or 1
//!   ndim       u32
//!   dims       u64 × ndim
//!   data       f64 × product(dims), row-major
//! n_buffers    u32
//! per normalization buffer, sorted by name:
//!   name_len   u32
//!   name       [u8]
//!   width      u32
//!   eps        f64
//!   momentum   f64
//!   mean       f64 × width
//!   var        f64 × width
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::NormState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Model, ModelConfig, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn write_checkpoint<T: Scalar>(model: &Model<T>, w: &mut impl Write) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    let cfg = serde_json::to_string(model.config()).map_err(|e| Error::Config(e.to_string()))?;
    put_str(&mut out, &cfg);
    let store = model.store();
    put_u32(&mut out, store.len());
    for p in store.params() {
        put_str(&mut out, &p.name);
        out.push(p.frozen as u8);
        put_u32(&mut out, p.value.shape().len());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            put_f64(&mut out, v.to_f64_lossy());
        }
    }
    put_u32(&mut out, store.buffers().len());
    for (name, s) in store.buffers() {
        put_str(&mut out, name);
        put_u32(&mut out, s.width());
        put_f64(&mut out, s.eps.to_f64_lossy());
        put_f64(&mut out, s.momentum.to_f64_lossy());
        for v in s.running_mean.iter().chain(&s.running_var) {
            put_f64(&mut out, v.to_f64_lossy());
        }
    }
    w.write_all(&out).map_err(|e| Error::io("<checkpoint>", e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                path: "<checkpoint>".into(),
                msg: format!(
                    "truncated: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| bad(e.to_string()))
    }
}

fn bad(msg: String) -> Error {
    Error::Format {
        path: "<checkpoint>".into(),
        msg,
    }
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<Model<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let cfg: ModelConfig = serde_json::from_str(&c.string()?).map_err(|e| bad(format!("config: {e}")))?;
    let mut store = ParamStore::new();
    for _ in 0..c.u32()? {
        let name = c.string()?;
        let frozen = match c.take(1)?[0] {
            0 => false,
            1 => true,
            f => return Err(bad(format!("'{name}': bad frozen flag {f}"))),
        };
        let ndim = c.u32()?;
        let dims = (0..ndim).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let data = (0..numel).map(|_| c.f64().map(T::of)).collect::<Result<Vec<_>>>()?;
        store.insert(&name, Tensor::new(dims, data)?)?;
        store.get_mut(&name)?.frozen = frozen;
    }
    for _ in 0..c.u32()? {
        let name = c.string()?;
        let width = c.u32()?;
        let mut s = NormState::new(width);
        s.eps = T::of(c.f64()?);
        s.momentum = T::of(c.f64()?);
        for i in 0..width {
            s.running_mean[i] = T::of(c.f64()?);
        }
        for i in 0..width {
            s.running_var[i] = T::of(c.f64()?);
        }
        store.insert_buffer(&name, s)?;
    }
    if c.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Model::from_parts(cfg, store)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f).map_err(|e| match e {
        Error::Format { msg, .. } => Error::Format {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}
