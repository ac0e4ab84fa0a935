//! Binary checkpoints.
//!
//! ```text
//! "AIMA" | version u32 | n_cfg u32 | n_cfg x u64 | n_tensors u32 |
//!   per tensor: name_len u32 | name | ndim u32 | ndim x u32 | f32 data
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use ndarray::Array2;

use super::{Model, ModelConfig, Params, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AIMA";
pub const CHECKPOINT_VERSION: u32 = 1;
const CONFIG_FIELDS: u32 = 10;

fn config_values(c: &ModelConfig) -> [u64; CONFIG_FIELDS as usize] {
    [
        c.layers as u64,
        c.heads as u64,
        c.d_model as u64,
        c.d_ff as u64,
        c.visual_vocab as u64,
        c.text_vocab as u64,
        c.max_rows as u64,
        c.max_cols as u64,
        c.max_query_len as u64,
        c.seed,
    ]
}

pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&CONFIG_FIELDS.to_le_bytes());
    for v in config_values(model.config()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let tensors = model.params().tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        let (r, c) = t.value.dim();
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for v in t.value.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn to_usize(v: u64, name: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Config(format!("{name} = {v} does not fit")))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let n_cfg = r.u32("config block")?;
    if n_cfg != CONFIG_FIELDS {
        return Err(Error::TensorTable(format!("config block has {n_cfg} fields, expected {CONFIG_FIELDS}")));
    }
    let mut v = [0u64; CONFIG_FIELDS as usize];
    for slot in &mut v {
        *slot = r.u64("config block")?;
    }
    let config = ModelConfig {
        layers: to_usize(v[0], "layers")?,
        heads: to_usize(v[1], "heads")?,
        d_model: to_usize(v[2], "d_model")?,
        d_ff: to_usize(v[3], "d_ff")?,
        visual_vocab: to_usize(v[4], "visual_vocab")?,
        text_vocab: to_usize(v[5], "text_vocab")?,
        max_rows: to_usize(v[6], "max_rows")?,
        max_cols: to_usize(v[7], "max_cols")?,
        max_query_len: to_usize(v[8], "max_query_len")?,
        seed: v[9],
    };
    config.validate()?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32("tensor name")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::TensorTable("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32("tensor shape")?;
        if ndim != 2 {
            return Err(Error::TensorTable(format!("{name}: {ndim} dimensions, expected 2")));
        }
        let rows = r.u32("tensor shape")? as usize;
        let cols = r.u32("tensor shape")? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::TensorTable(format!("{name}: shape overflow")))?;
        let data = r.take(n.checked_mul(4).ok_or(Error::Truncated("tensor data"))?, "tensor data")?;
        let values: Vec<f64> =
            data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
        let value = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        tensors.push(Tensor { name, value });
    }
    if r.pos != bytes.len() {
        return Err(Error::TensorTable(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_parts(config, Params::from_tensors(tensors))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
