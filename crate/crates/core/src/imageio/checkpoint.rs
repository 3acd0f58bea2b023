use std::collections::HashSet;
use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MRVS";
pub const CHECKPOINT_VERSION: i32 = 1;

/// `MRVS | version | count | { name_len, name, rank, dims.., payload.. }*`
pub fn encode_checkpoint(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for (name, _) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::Validation(format!("duplicate tensor name {name:?}")));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as i32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as i32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as i32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as i32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Length {
                expected: n,
                found: self.bytes.len() - self.pos,
            }),
        }
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.i32()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("negative {what} {v}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(4)
        .map_err(|_| Error::Format("file too short for MRVS magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "expected magic \"MRVS\", found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.i32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.count("tensor count")?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = r.count("name length")?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        let rank = r.count("rank")?;
        if rank > 8 {
            return Err(Error::Format(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.count("dimension")?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
            shape.push(d);
        }
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| {
            Error::Format("tensor size overflows".into())
        })?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Length {
            expected: r.pos,
            found: bytes.len(),
        });
    }
    Ok(entries)
}

pub fn save_checkpoint(entries: &[(String, Tensor<f32>)], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(entries)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    decode_checkpoint(&read_file(path.as_ref())?)
}
