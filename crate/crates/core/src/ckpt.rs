//! Checkpoint serialization: a single binary container holding a canonical
//! config block and named tensor records, integrity-protected by a trailing
//! FNV-1a content hash. The same container (with an empty config block)
//! carries raw tensor dumps.
//!
//! Layout, all integers little-endian:
//! `"M3AT" | version u32 | config_len u32 | config bytes | count u32 |
//!  records… | fnv1a64 u64` where each record is
//! `name_len u32 | name | rank u32 | dims u32… | data f64…`.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::kvconfig::{model_config_from_kv, model_config_to_kv, KvConfig};
use crate::model::Model;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"M3AT";
pub const VERSION: u32 = 1;

/// One named tensor in a container.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn push_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v32 = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v32.to_le_bytes());
    Ok(())
}

/// Writes a container. Byte output is a pure function of the inputs.
pub fn save_records(path: &Path, config_text: &str, records: &[TensorRecord]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_u32(&mut out, config_text.len(), "config length")?;
    out.extend_from_slice(config_text.as_bytes());
    push_u32(&mut out, records.len(), "record count")?;
    for r in records {
        push_u32(&mut out, r.name.len(), "name length")?;
        out.extend_from_slice(r.name.as_bytes());
        push_u32(&mut out, r.shape.len(), "rank")?;
        let mut numel = 1usize;
        for d in &r.shape {
            push_u32(&mut out, *d, "extent")?;
            numel *= d;
        }
        if r.data.len() != numel {
            return Err(Error::Checkpoint(format!(
                "record '{}': {} values for {} elements",
                r.name,
                r.data.len(),
                numel
            )));
        }
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hash = fnv1a64(&out);
    out.extend_from_slice(&hash.to_le_bytes());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("{}: truncated", self.path.display())));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a container back, verifying magic, version, and content hash.
pub fn load_records(path: &Path) -> Result<(String, Vec<TensorRecord>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Checkpoint(format!("{}: too short", path.display())));
    }
    let (head, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(head) != stored {
        return Err(Error::Checkpoint(format!(
            "{}: content hash mismatch (corrupt or tampered)",
            path.display()
        )));
    }
    let mut r = Reader {
        bytes: head,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {version} unsupported (expected {VERSION})",
            path.display()
        )));
    }
    let config_len = r.u32()? as usize;
    let config = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| Error::Checkpoint(format!("{}: config block is not utf-8", path.display())))?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: tensor name is not utf-8", path.display())))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            shape.push(d);
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("{}: extent overflow", path.display())))?;
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        records.push(TensorRecord { name, shape, data });
    }
    if r.pos != head.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            head.len() - r.pos
        )));
    }
    Ok((config, records))
}

/// Serializes the model: canonical config block, then every parameter and
/// every normalization buffer in registry order.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut records = Vec::new();
    for (name, p) in model.named_params() {
        records.push(TensorRecord {
            name,
            shape: p.shape().to_vec(),
            data: p.to_vec(),
        });
    }
    for (name, b) in model.named_buffers() {
        let data = b.borrow().clone();
        records.push(TensorRecord {
            name,
            shape: vec![data.len()],
            data,
        });
    }
    save_records(path, &model_config_to_kv(&model.cfg), &records)
}

/// Rebuilds a model from a checkpoint: constructs it from the embedded
/// config, then overwrites every parameter and buffer from the records.
/// Every record must match a registry entry and vice versa.
pub fn load_model(path: &Path) -> Result<Model> {
    let (config_text, records) = load_records(path)?;
    let cfg = model_config_from_kv(&KvConfig::parse(&config_text)?)?;
    let model = Model::new(cfg)?;

    let params = model.named_params();
    let buffers = model.named_buffers();
    let mut consumed = vec![false; params.len() + buffers.len()];
    for rec in &records {
        if let Some(idx) = params.iter().position(|(n, _)| *n == rec.name) {
            let (_, p) = &params[idx];
            if p.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}': shape {:?} does not match the model's {:?}",
                    rec.name,
                    rec.shape,
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(&rec.data);
            consumed[idx] = true;
        } else if let Some(idx) = buffers.iter().position(|(n, _)| *n == rec.name) {
            let (_, b) = &buffers[idx];
            if b.borrow().len() != rec.data.len() {
                return Err(Error::Checkpoint(format!(
                    "buffer '{}': {} values do not match the model's {}",
                    rec.name,
                    rec.data.len(),
                    b.borrow().len()
                )));
            }
            b.borrow_mut().copy_from_slice(&rec.data);
            consumed[params.len() + idx] = true;
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor '{}'", rec.name)));
        }
    }
    if let Some(missing) = consumed.iter().position(|c| !c) {
        let name = if missing < params.len() {
            &params[missing].0
        } else {
            &buffers[missing - params.len()].0
        };
        return Err(Error::Checkpoint(format!("checkpoint is missing tensor '{name}'")));
    }
    Ok(model)
}
