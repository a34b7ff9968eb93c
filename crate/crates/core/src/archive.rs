//! Checkpoint container: a text manifest plus named little-endian arrays.
//!
//! | field     | encoding                                                  |
//! |-----------|-----------------------------------------------------------|
//! | magic     | `MPGC`                                                    |
//! | version   | u32                                                       |
//! | manifest  | u32 byte length + UTF-8 `key=value` lines                 |
//! | count     | u32 number of arrays                                      |
//! | array     | u32 name length, name, u8 dtype (1 = f32, 2 = f64), u32 rank, u64 dims, payload |
//! | checksum  | u64 FNV-1a of every preceding byte                        |

use std::io;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"MPGC";
pub const ARCHIVE_VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub manifest: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

enum Fault {
    Version(String),
    Corrupt(String),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Fault> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Fault::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, Fault> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, Fault> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, Fault> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, Fault> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Fault::Corrupt("invalid UTF-8".into()))
    }
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.manifest.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push_array(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Encodes every array as f64, so decoding is exact.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        let manifest: String = self.manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    fn decode(bytes: &[u8]) -> Result<Archive, Fault> {
        if bytes.len() < 8 || &bytes[..4] != ARCHIVE_MAGIC {
            return Err(Fault::Version("not a checkpoint archive".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != ARCHIVE_VERSION {
            return Err(Fault::Version(format!("archive version {version}, expected {ARCHIVE_VERSION}")));
        }
        if bytes.len() < 16 {
            return Err(Fault::Corrupt("truncated archive".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(Fault::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let manifest_text = r.string()?;
        let mut manifest = Vec::new();
        for line in manifest_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Fault::Corrupt(format!("manifest line {line:?}")))?;
            manifest.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.u8()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Fault::Corrupt(format!("{name}: shape overflow")))?;
            let data = match dtype {
                DTYPE_F64 => r
                    .take(n.checked_mul(8).ok_or_else(|| Fault::Corrupt("size overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DTYPE_F32 => r
                    .take(n.checked_mul(4).ok_or_else(|| Fault::Corrupt("size overflow".into()))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(Fault::Corrupt(format!("{name}: unknown dtype {other}"))),
            };
            arrays.push((name, Tensor::new(shape, data)));
        }
        if r.pos != body.len() {
            return Err(Fault::Corrupt("trailing bytes".into()));
        }
        Ok(Archive { manifest, arrays })
    }

    /// Decodes an archive; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Archive> {
        Archive::decode(bytes).map_err(|f| match f {
            Fault::Version(m) => Error::VersionMismatch(m),
            Fault::Corrupt(m) => Error::io(origin, io::Error::new(io::ErrorKind::InvalidData, m)),
        })
    }

    /// Writes through a temporary file and rename, so a crash never leaves
    /// a half-written checkpoint under `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Archive> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes, path)
    }
}
