//! Versioned binary container shared by every artifact file.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DILAMBIN" | u32 version | u64 payload length | payload | u64 checksum
//! payload = str kind | str metadata-json | u32 blob count | blob*
//! blob    = str name | u8 dtype | u32 ndim | u64 dim* | element*
//! str     = u32 byte length | utf-8 bytes
//! ```
//!
//! The checksum is the first 8 bytes of SHA-256 over the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DILAMBIN";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl BlobData {
    pub fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_len(&self) -> usize {
        match self {
            BlobData::F32(v) => 4 * v.len(),
            BlobData::F64(v) => 8 * v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlobData,
}

impl Blob {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Blob {
            name: name.into(),
            shape,
            data: BlobData::F32(data),
        }
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Blob {
            name: name.into(),
            shape,
            data: BlobData::F64(data),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blobs: Vec<Blob>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            blobs: Vec::new(),
        }
    }

    pub fn push(&mut self, blob: Blob) {
        self.blobs.push(blob);
    }

    pub fn blob(&self, name: &str) -> Result<&Blob> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Corrupt(format!("missing blob `{name}`")))
    }

    pub fn f32s(&self, name: &str) -> Result<&[f32]> {
        match &self.blob(name)?.data {
            BlobData::F32(v) => Ok(v),
            BlobData::F64(_) => Err(Error::Corrupt(format!("blob `{name}` is not f32"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.blob(name)?.data {
            BlobData::F64(v) => Ok(v),
            BlobData::F32(_) => Err(Error::Corrupt(format!("blob `{name}` is not f64"))),
        }
    }

    /// Element bytes of the blobs accepted by `filter`.
    pub fn payload_bytes(&self, filter: impl Fn(&Blob) -> bool) -> usize {
        self.blobs
            .iter()
            .filter(|b| filter(b))
            .map(|b| b.data.byte_len())
            .sum()
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Corrupt(format!(
                "expected a {kind} file, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut p = Vec::new();
        put_str(&mut p, &self.kind);
        put_str(&mut p, &serde_json::to_string(&self.meta)?);
        p.extend((self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(Error::shape("container blob", &b.shape, &[b.data.len()]));
            }
            put_str(&mut p, &b.name);
            match &b.data {
                BlobData::F32(_) => p.push(0),
                BlobData::F64(_) => p.push(1),
            }
            p.extend((b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                p.extend((d as u64).to_le_bytes());
            }
            match &b.data {
                BlobData::F32(v) => v.iter().for_each(|x| p.extend(x.to_le_bytes())),
                BlobData::F64(v) => v.iter().for_each(|x| p.extend(x.to_le_bytes())),
            }
        }
        let mut out = Vec::with_capacity(HEADER + p.len() + 8);
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((p.len() as u64).to_le_bytes());
        out.extend(&p);
        out.extend(checksum(&p).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                Error::Truncated(format!("{} bytes", bytes.len()))
            } else {
                Error::Corrupt("bad magic".into())
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        if bytes.len() < HEADER {
            return Err(Error::Truncated(format!("{} header bytes", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let end = HEADER.saturating_add(len);
        if bytes.len() < end.saturating_add(8) {
            return Err(Error::Truncated(format!(
                "{} of {} bytes",
                bytes.len(),
                end.saturating_add(8)
            )));
        }
        if bytes.len() > end + 8 {
            return Err(Error::Corrupt("trailing bytes".into()));
        }
        let payload = &bytes[HEADER..end];
        let stored = u64::from_le_bytes(bytes[end..end + 8].try_into().unwrap());
        if stored != checksum(payload) {
            return Err(Error::PayloadChecksum);
        }

        let mut r = Reader {
            buf: payload,
            pos: 0,
        };
        let kind = r.string()?;
        let meta = serde_json::from_str(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt("blob too large".into()))?;
            let data = match dtype {
                0 => BlobData::F32(
                    r.take(
                        n.checked_mul(4)
                            .ok_or_else(|| Error::Corrupt("blob too large".into()))?,
                    )?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                ),
                1 => BlobData::F64(
                    r.take(
                        n.checked_mul(8)
                            .ok_or_else(|| Error::Corrupt("blob too large".into()))?,
                    )?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                ),
                d => return Err(Error::Corrupt(format!("unknown dtype {d}"))),
            };
            blobs.push(Blob { name, shape, data });
        }
        if r.pos != payload.len() {
            return Err(Error::Corrupt("unread payload bytes".into()));
        }
        Ok(Container { kind, meta, blobs })
    }

    /// Writes via a temporary sibling file and a rename, so readers never
    /// observe a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn checksum(payload: &[u8]) -> u64 {
    let d = Sha256::digest(payload);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

// The payload checksum has already passed when this runs, so running out
// of bytes here means the writer itself was inconsistent.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt("payload shorter than declared".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Corrupt("invalid utf-8".into()))
    }
}
