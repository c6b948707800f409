//! Binary checkpoint format.
//!
//! ```text
//! "LIPF" | u32 version=1 | u32 count
//! per tensor: u16 name_len | name (UTF-8) | u8 dtype (0=f32, 1=f64) | u8 rank | u32 dims[rank] | payload
//! optional trailer: "CONF" | u32 len | UTF-8 config echo
//! ```
//! All integers and payload values are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Float, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LIPF";
const CONFIG_TAG: &[u8; 4] = b"CONF";
const VERSION: u32 = 1;

/// One stored tensor; values are widened to `f64` (lossless for `f32`).
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<StoredTensor>,
    pub config: Option<String>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies every stored tensor into the same-named tensor of `store`.
    /// Every tensor of the store must be present with a matching shape.
    pub fn apply<F: Float>(&self, store: &mut ParamStore<F>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let stored = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if stored.shape != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    stored.shape,
                    store.get(id).shape()
                )));
            }
            let values: Vec<F> = stored
                .values
                .iter()
                .map(|&v| F::from_f64(v).unwrap_or_else(F::nan))
                .collect();
            store.set_data(id, &values)?;
        }
        Ok(())
    }
}

pub fn write_checkpoint<F: Float, W: Write>(
    mut w: W,
    store: &ParamStore<F>,
    config: Option<&str>,
) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        let bytes = name.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(F::DTYPE as u8);
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    if let Some(cfg) = config {
        buf.extend_from_slice(CONFIG_TAG);
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg.as_bytes());
    }
    w.write_all(&buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("unknown magic (expected LIPF)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_byte(c.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype for `{name}`")))?;
        let rank = c.u8()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = c.take(numel * dtype.size())?;
        let values = match dtype {
            DType::F32 => payload.chunks(4).map(|b| f64::from(f32::read_le(b))).collect(),
            DType::F64 => payload.chunks(8).map(f64::read_le).collect(),
        };
        tensors.push(StoredTensor {
            name,
            dtype,
            shape,
            values,
        });
    }
    let mut config = None;
    if c.pos < bytes.len() {
        if c.take(4)? != CONFIG_TAG {
            return Err(Error::Checkpoint("unexpected trailing bytes".into()));
        }
        let len = c.u32()? as usize;
        let text = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("config section is not UTF-8".into()))?;
        config = Some(text.to_string());
        if c.pos != bytes.len() {
            return Err(Error::Checkpoint("unexpected bytes after config section".into()));
        }
    }
    Ok(Checkpoint { tensors, config })
}

pub fn save_checkpoint<F: Float>(path: &Path, store: &ParamStore<F>, config: Option<&str>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(file), store, config).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
