//! The little-endian weight file.
//!
//! ```text
//! "LMSF" | u32 version | u8 form | u32 config length | config (UTF-8)
//! u32 entry count
//! per entry: u16 name length | name | u8 rank | rank x u32 dims | f32 payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::reparam::Form;

pub const MAGIC: &[u8; 4] = b"LMSF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    pub form: Form,
    /// The model configuration in `key = value` text form.
    pub config: String,
    pub entries: Vec<Entry>,
}

fn form_byte(form: Form) -> u8 {
    match form {
        Form::Train => 0,
        Form::Deploy => 1,
    }
}

impl WeightStore {
    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(form_byte(self.form));
        out.extend_from_slice(&len_u32("config", self.config.len())?.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&len_u32("entry count", self.entries.len())?.to_le_bytes());
        for e in &self.entries {
            let name_len = u16::try_from(e.name.len())
                .map_err(|_| Error::Weights(format!("entry name `{}` longer than 65535 bytes", e.name)))?;
            let rank = u8::try_from(e.dims.len())
                .map_err(|_| Error::Weights(format!("entry `{}` has rank {}", e.name, e.dims.len())))?;
            let numel: u64 = e.dims.iter().map(|&d| d as u64).product();
            if numel != e.data.len() as u64 {
                return Err(Error::Weights(format!(
                    "entry `{}`: dims {:?} hold {numel} values, payload has {}",
                    e.name,
                    e.dims,
                    e.data.len()
                )));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(rank);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Weights(format!(
                "bad magic {:?}, expected \"LMSF\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Weights(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let form = match r.u8("form")? {
            0 => Form::Train,
            1 => Form::Deploy,
            b => return Err(Error::Weights(format!("unknown form byte {b}"))),
        };
        let clen = r.u32("config length")? as usize;
        let config = String::from_utf8(r.take(clen, "config")?.to_vec())
            .map_err(|_| Error::Weights("config blob is not UTF-8".into()))?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let nlen = r.u16("entry name length")? as usize;
            let name = String::from_utf8(r.take(nlen, "entry name")?.to_vec())
                .map_err(|_| Error::Weights(format!("entry {i} name is not UTF-8")))?;
            let rank = r.u8("entry rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("entry dims")).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let numel = numel.ok_or_else(|| Error::Weights(format!("entry `{name}` dims {dims:?} overflow")))?;
            let payload = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Weights(format!("entry `{name}` too large")))?,
                "entry payload",
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Weights(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(WeightStore { form, config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn len_u32(what: &str, n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Weights(format!("{what} {n} exceeds u32")))
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
            .ok_or_else(|| {
                Error::Weights(format!(
                    "truncated file: {what} needs {n} bytes at offset {}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
