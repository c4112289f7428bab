//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TQT1" | version: u16 | count: u32 | entry*
//! entry: name_len: u16 | name: utf-8 | dtype: u8 | rank: u8 | dims: u32 * rank | payload
//! ```
//!
//! dtype codes: 0 = f32, 1 = i32, 2 = u8.

use crate::error::{Error, Result};
use std::collections::BTreeSet;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"TQT1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
    /// Byte offset of the entry header in the file it was read from.
    pub offset: u64,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: TensorData) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
            offset: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, entry: Entry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(Error::Config(format!("duplicate entry `{}`", entry.name)));
        }
        let expected: usize = entry.dims.iter().product();
        if expected != entry.data.len() {
            return Err(Error::Shape {
                expected: entry.dims.clone(),
                got: vec![entry.data.len()],
            });
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::Config("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("entry name too long: {}", e.name)))?;
            let rank = u8::try_from(e.dims.len()).map_err(|_| Error::Config(format!("rank too large: {}", e.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.data.dtype_code());
            out.push(rank);
            for &d in &e.dims {
                let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension too large: {}", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, expected TQT1"));
        }
        let at = r.pos as u64;
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.array("entry count")?);
        let mut names = BTreeSet::new();
        let mut entries = Vec::new();
        for _ in 0..count {
            let offset = r.pos as u64;
            let len = u16::from_le_bytes(r.array("name length")?) as usize;
            let name_at = r.pos as u64;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::format(name_at, "entry name is not utf-8"))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::format(offset, format!("duplicate entry `{name}`")));
            }
            let dtype_at = r.pos as u64;
            let dtype = r.take(1, "dtype")?[0];
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(r.array("dimension")?) as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(offset, format!("`{name}`: element count overflows")))?;
            let data = match dtype {
                0 => TensorData::F32(
                    r.take(numel.saturating_mul(4), "payload")?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                1 => TensorData::I32(
                    r.take(numel.saturating_mul(4), "payload")?
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                2 => TensorData::U8(r.take(numel, "payload")?.to_vec()),
                other => return Err(Error::format(dtype_at, format!("`{name}`: unknown dtype code {other}"))),
            };
            entries.push(Entry {
                name,
                dims,
                data,
                offset,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last entry"));
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::default();
        c.push(Entry::new("a.weight", vec![2, 2], TensorData::F32(vec![1.0, -2.5, 3.25, 0.0]))).unwrap();
        c.push(Entry::new("labels", vec![3], TensorData::I32(vec![0, 7, -1]))).unwrap();
        c.push(Entry::new("mask", vec![2], TensorData::U8(vec![1, 255]))).unwrap();
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.get("labels").unwrap().data, TensorData::I32(vec![0, 7, -1]));
        assert_eq!(back.entries[0].offset, 10);
    }

    #[test]
    fn errors_name_offsets() {
        let mut bytes = sample().to_bytes().unwrap();
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));

        let truncated = &good[..good.len() - 1];
        let Err(Error::Format { offset, .. }) = Container::from_bytes(truncated) else {
            panic!("expected format error")
        };
        assert!(offset > 10);

        // dtype byte of the first entry: header 10 + name len 2 + "a.weight" 8
        let mut bad = good.clone();
        bad[20] = 9;
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format { offset: 20, .. })));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut c = sample();
        assert!(c.push(Entry::new("mask", vec![1], TensorData::U8(vec![0]))).is_err());
    }
}
