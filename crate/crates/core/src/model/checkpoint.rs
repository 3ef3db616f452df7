//! Checkpoint container.
//!
//! ```text
//! "SPKSEG01"
//! u32 LE length | metadata JSON (compact, fixed field order)
//! u32 LE parameter count
//! per parameter: u32 LE name length | UTF-8 name | u32 LE rank | rank x u32 LE dims | f32 LE values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SpikingUSegNet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Parameter, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPKSEG01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Anatomical view the weights were trained on.
    #[serde(default)]
    pub view: Option<String>,
    /// Last completed epoch (1-based), if written during training.
    #[serde(default)]
    pub epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub model: SpikingUSegNet<T>,
}

pub fn encode_checkpoint<T: Scalar>(meta: &CheckpointMeta, model: &SpikingUSegNet<T>) -> Result<Vec<u8>> {
    if &meta.model != model.config() {
        return Err(Error::invalid("checkpoint metadata config differs from the model"));
    }
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + model.param_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&u32_len(json.len())?.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&u32_len(model.params().len())?.to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&u32_len(p.name.len())?.to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&u32_len(p.shape().len())?.to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&u32_len(d)?.to_le_bytes());
        }
        for &v in p.value.data() {
            let f = v.to_f32().ok_or(Error::NonFinite { op: "checkpoint encode" })?;
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("length {n} exceeds u32")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                what,
                expected: (self.pos as u64).saturating_add(n as u64),
                actual: self.buf.len() as u64,
            }),
        }
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(8, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let len = cur.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(len, "metadata")?)
        .map_err(|e| Error::Header(e.to_string()))?;
    let mut model = SpikingUSegNet::<T>::build(meta.model.clone(), 0)?;
    let count = cur.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = cur.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(cur.take(nlen, "parameter name")?)
            .map_err(|e| Error::Header(e.to_string()))?
            .to_owned();
        let rank = cur.u32("parameter rank")? as usize;
        if rank > 8 {
            return Err(Error::Header(format!("parameter `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| cur.u32("parameter shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = numel(&shape)?;
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::ShapeOverflow(shape.clone()))?, "parameter data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        params.push(Parameter::new(name, Tensor::new(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Header(format!("{} trailing bytes after parameters", bytes.len() - cur.pos)));
    }
    model.load_params(&params)?;
    Ok(Checkpoint { meta, model })
}

pub fn write_checkpoint<T: Scalar>(path: &Path, meta: &CheckpointMeta, model: &SpikingUSegNet<T>) -> Result<()> {
    let bytes = encode_checkpoint(meta, model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
