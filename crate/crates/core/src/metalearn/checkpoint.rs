//! Binary checkpoints.
//!
//! Layout (little-endian): the magic `MSKL1`, a `u32` length and JSON
//! config echo, a `u32` parameter count, then per parameter a `u32` name
//! length and UTF-8 name, a `u8` trainable flag, a `u32` rank, `u64` dims
//! and the `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::learner::{LearnerKind, MetaModel};
use crate::array::Array;
use crate::diffcore::{ParamSet, Parameter};
use crate::error::{Error, Result};
use crate::seqnet::BackboneConfig;

pub const MAGIC: &[u8; 5] = b"MSKL1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: LearnerKind,
    n_way: Option<usize>,
    backbone: BackboneConfig,
}

pub fn checkpoint_bytes(model: &MetaModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        kind: model.kind,
        n_way: model.n_way,
        backbone: model.config.clone(),
    })?;
    let mut out = MAGIC.to_vec();
    out.extend((header.len() as u32).to_le_bytes());
    out.extend(header);
    out.extend((model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        out.extend((p.name.len() as u32).to_le_bytes());
        out.extend(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.extend((p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            .map_err(|_| Error::Checkpoint("dimension overflow".into()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<MetaModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected MSKL1".into()));
    }
    let n = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Checkpoint(format!("config header: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => {
                return Err(Error::Checkpoint(format!(
                    "bad trainable flag {b} for {name}"
                )))
            }
        };
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("shape overflow for {name}")))?;
        let raw = r.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(Parameter {
            name,
            value: Array::new(shape, data)?,
            trainable,
        })?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    MetaModel::from_parts(header.kind, header.backbone, header.n_way, params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &MetaModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MetaModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        for kind in LearnerKind::ALL {
            let m = MetaModel::init(kind, 2, 2, 5).unwrap();
            let bytes = checkpoint_bytes(&m).unwrap();
            let back = checkpoint_from_bytes(&bytes).unwrap();
            assert_eq!(back.params, m.params);
            assert_eq!((back.kind, back.n_way), (m.kind, m.n_way));
            assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = MetaModel::init(LearnerKind::ProtoNet, 2, 2, 5).unwrap();
        let bytes = checkpoint_bytes(&m).unwrap();
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(checkpoint_from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(checkpoint_from_bytes(&long).is_err());
    }
}
