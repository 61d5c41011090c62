//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OANCKPT1"            8 bytes magic
//! count                 u32
//! per entry:
//!   name_len            u16
//!   name                UTF-8
//!   rank                u8
//!   dims                rank × u32
//!   values              prod(dims) × f32
//! fnv1a64               u64 over every preceding byte
//! ```

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OANCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], values: Vec<f32>) {
        self.entries.push(Entry {
            name: name.into(),
            dims: dims.to_vec(),
            values,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::validation("checkpoint", "too many entries"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            let name_len = u16::try_from(e.name.len())
                .map_err(|_| Error::validation("checkpoint", format!("name too long: {}", e.name)))?;
            let rank = u8::try_from(e.dims.len())
                .map_err(|_| Error::validation("checkpoint", "rank exceeds 255"))?;
            if e.dims.iter().product::<usize>() != e.values.len() {
                return Err(Error::Shape {
                    context: "checkpoint entry",
                    expected: e.dims.clone(),
                    actual: vec![e.values.len()],
                });
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(rank);
            for &d in &e.dims {
                let d = u32::try_from(d)
                    .map_err(|_| Error::validation("checkpoint", "dimension exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..8] != MAGIC {
            return Err(bad("missing OANCKPT1 magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if stored != fnv1a64(body) {
            return Err(bad("checksum mismatch"));
        }
        let mut cur = Cursor { buf: body, pos: 8 };
        let count = cur.u32().ok_or_else(|| bad("truncated header"))?;
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let entry = (|| {
                let name_len = cur.u16()? as usize;
                let name = std::str::from_utf8(cur.take(name_len)?).ok()?.to_string();
                let rank = cur.take(1)?[0] as usize;
                let dims = (0..rank)
                    .map(|_| cur.u32().map(|d| d as usize))
                    .collect::<Option<Vec<_>>>()?;
                let n: usize = dims.iter().product();
                let raw = cur.take(n.checked_mul(4)?)?;
                let values = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Some(Entry { name, dims, values })
            })()
            .ok_or_else(|| bad("truncated entry"))?;
            ckpt.entries.push(entry);
        }
        if cur.pos != body.len() {
            return Err(bad("trailing bytes before checksum"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(trailing_checksum(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// The checksum stored in the last eight bytes of a serialised container.
pub fn trailing_checksum(bytes: &[u8]) -> u64 {
    let tail = &bytes[bytes.len().saturating_sub(8)..];
    let mut buf = [0u8; 8];
    buf[..tail.len()].copy_from_slice(tail);
    u64::from_le_bytes(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_layout() {
        let mut c = Checkpoint::default();
        c.push("w", &[2], vec![1.0, -2.0]);
        let bytes = c.to_bytes().unwrap();
        let mut want = b"OANCKPT1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'w');
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        let sum = fnv1a64(&want);
        want.extend_from_slice(&sum.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn corrupt_checksum_rejected() {
        let mut c = Checkpoint::default();
        c.push("bias", &[1], vec![0.5]);
        let mut bytes = c.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 9] ^= 0xff;
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = Checkpoint::default();
        c.push("a.weight", &[2, 1, 3, 3], (0..18).map(|v| v as f32 * 0.5).collect());
        c.push("scalar", &[], vec![3.25]);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap(), c);
    }
}
