//! Flat binary checkpoint: a magic tag, a record count, then per parameter
//! its name, group, shape and little-endian `f64` data, in store order.

use super::{ParamGroup, ParamStore};
use crate::error::{GammaError, Result};

const MAGIC: &[u8; 8] = b"GAMMACK1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

pub fn write_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, store.len() as u64);
    for p in store.params() {
        put_str(&mut out, &p.name);
        put_str(&mut out, p.group.name());
        put_u64(&mut out, p.tensor.shape().len() as u64);
        for &d in p.tensor.shape() {
            put_u64(&mut out, d as u64);
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            GammaError::Input(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| GammaError::Input(format!("implausible length {v} in checkpoint")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| GammaError::Input("checkpoint name is not UTF-8".into()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(GammaError::Input("not a checkpoint file".into()));
    }
    let count = r.len()?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let group = ParamGroup::from_name(&r.string()?)
            .map_err(|e| GammaError::Input(format!("checkpoint record {name}: {e}")))?;
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel
            .filter(|&n| n.saturating_mul(8) <= bytes.len())
            .ok_or_else(|| GammaError::Input(format!("implausible shape {shape:?} for {name}")))?;
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push(CheckpointRecord { name, group, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(GammaError::Input("trailing bytes after checkpoint".into()));
    }
    Ok(records)
}

/// Serializes records directly (inverse of [`read_checkpoint`]).
pub fn records_to_bytes(records: &[CheckpointRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, records.len() as u64);
    for rec in records {
        put_str(&mut out, &rec.name);
        put_str(&mut out, rec.group.name());
        put_u64(&mut out, rec.shape.len() as u64);
        for &d in &rec.shape {
            put_u64(&mut out, d as u64);
        }
        for v in &rec.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

impl ParamStore {
    /// Replaces values from checkpoint records; names, groups and shapes must
    /// match this store exactly.
    pub fn load_records(&mut self, records: &[CheckpointRecord]) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(GammaError::Input(format!(
                "checkpoint has {} parameters, model has {}",
                records.len(),
                self.params.len()
            )));
        }
        for (p, rec) in self.params.iter().zip(records) {
            if p.name != rec.name || p.group != rec.group || p.tensor.shape() != rec.shape.as_slice() {
                return Err(GammaError::Input(format!(
                    "checkpoint record {} ({}, {:?}) does not match parameter {} ({}, {:?})",
                    rec.name,
                    rec.group,
                    rec.shape,
                    p.name,
                    p.group,
                    p.tensor.shape()
                )));
            }
        }
        for (p, rec) in self.params.iter_mut().zip(records) {
            p.tensor.data_mut().copy_from_slice(&rec.data);
        }
        Ok(())
    }
}
