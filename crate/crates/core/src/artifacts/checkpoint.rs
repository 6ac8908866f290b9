//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"GALN" | version: u32
//! repeated: name_len: u32 | name: utf-8 | rank: u32 | dims: u64 * rank | data: f64 * prod(dims)
//! crc64: u64   (CRC-64/XZ of every preceding byte)
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use crate::checksum::crc64;
use crate::error::{Error, Result};
use crate::numerics::{Array, Param, Parameterized};

pub const MAGIC: [u8; 4] = *b"GALN";
pub const FORMAT_VERSION: u32 = 1;

fn check_names<'a>(names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for name in names {
        if name.is_empty() {
            return Err(Error::Checkpoint("empty array name".into()));
        }
        if !seen.insert(name) {
            return Err(Error::Checkpoint(format!("duplicate array name `{name}`")));
        }
    }
    Ok(())
}

pub fn encode(arrays: &[(&str, &Array)]) -> Result<Vec<u8>> {
    check_names(arrays.iter().map(|(n, _)| *n))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, array) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(array.rank() as u32).to_le_bytes());
        for &d in array.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in array.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc64(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("{what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint. Checks run in order: magic, version, structure,
/// checksum. Nothing is returned unless all pass.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Array)>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing magic".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated("missing header or checksum".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let body_end = bytes.len() - 8;
    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: 8,
    };
    let mut arrays = Vec::new();
    while r.pos < body_end {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("array name is not utf-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension {d} too large")))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("shape {shape:?} overflows")))?;
        let payload = r.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint(format!("shape {shape:?} overflows")))?,
            "payload",
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let array = Array::new(shape, data).map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))?;
        arrays.push((name, array));
    }
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
    let computed = crc64(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    check_names(arrays.iter().map(|(n, _)| n.as_str()))?;
    Ok(arrays)
}

pub fn save_checkpoint(path: &Path, arrays: &[(&str, &Array)]) -> Result<()> {
    let bytes = encode(arrays)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Array)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Every parameter of `model`, in its canonical order.
pub fn save_model(path: &Path, model: &impl Parameterized) -> Result<()> {
    let params = model.params();
    let arrays: Vec<(&str, &Array)> = params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    save_checkpoint(path, &arrays)
}

/// Overwrites the parameters of `model` from `arrays`. The names and shapes
/// must match exactly; on error `model` is left untouched.
pub fn restore_params(model: &mut impl Parameterized, arrays: Vec<(String, Array)>) -> Result<()> {
    let mut by_name: std::collections::BTreeMap<String, Array> = arrays.into_iter().collect();
    {
        let params: Vec<&Param> = model.params();
        for p in &params {
            match by_name.get(&p.name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{}`", p.name))),
                Some(a) if a.shape() != p.value.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, checkpoint holds {:?}",
                        p.name,
                        p.value.shape(),
                        a.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if by_name.len() != params.len() {
            let known: BTreeSet<&str> = params.iter().map(|p| p.name.as_str()).collect();
            let extra = by_name
                .keys()
                .find(|k| !known.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected array `{extra}`")));
        }
    }
    for p in model.params_mut() {
        p.value = by_name.remove(&p.name).expect("checked above");
    }
    Ok(())
}

pub fn load_model(path: &Path, model: &mut impl Parameterized) -> Result<()> {
    restore_params(model, load_checkpoint(path)?)
}
