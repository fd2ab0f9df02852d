//! Versioned parameter container (`.mdck`).
//!
//! Layout, all integers big-endian:
//!
//! ```text
//! "MDCK" | version u16 | config text (u32 len, UTF-8 `key = value` lines)
//! | meta text (u32 len) | params: u32 count, tensor* | extra: u32 count, tensor*
//! | CRC-32 (u32) of every preceding byte
//! tensor := name (u16 len, UTF-8) | ndim u8 | dims u32* | values f64*
//! ```

use std::io::Write;
use std::path::Path;

use super::params::{ModelConfig, ModelParams};
use crate::error::{MdcError, Result};
use crate::kv;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MDCK";
pub const VERSION: u16 = 1;

/// Model parameters plus free-form metadata and auxiliary tensors (for
/// example optimizer moments).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: Vec<(String, String)>,
    pub extra: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint { params, meta: Vec::new(), extra: Vec::new() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_be_bytes());
        put_text(&mut out, &kv::format(&self.params.config().to_pairs()))?;
        put_text(&mut out, &kv::format(&self.meta))?;
        let params: Vec<(&str, &Tensor)> =
            self.params.names().iter().map(String::as_str).zip(self.params.tensors()).collect();
        put_tensors(&mut out, &params)?;
        let extra: Vec<(&str, &Tensor)> = self.extra.iter().map(|(n, t)| (n.as_str(), t)).collect();
        put_tensors(&mut out, &extra)?;
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| MdcError::Checkpoint(m.to_string());
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_be_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u16::from_be_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(MdcError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut config = ModelConfig::default();
        config.apply_pairs(&kv::parse(&r.text()?)?)?;
        let meta = kv::parse(&r.text()?)?;
        let params = r.tensors()?;
        let extra = r.tensors()?;
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { params: ModelParams::from_parts(config, params)?, meta, extra })
    }

    /// Writes to a temporary file beside `path` and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        Self::from_bytes(&bytes)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        kv::get(&self.meta, key)
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| MdcError::Checkpoint("text section too long".into()))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let too_big = |what: &str| MdcError::Checkpoint(format!("{what} does not fit the container"));
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| too_big("tensor count"))?.to_be_bytes());
    for (name, t) in tensors {
        let nlen = u16::try_from(name.len()).map_err(|_| too_big("tensor name"))?;
        out.extend_from_slice(&nlen.to_be_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.shape().len()).map_err(|_| too_big("rank"))?);
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("dimension"))?.to_be_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(MdcError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| MdcError::Checkpoint("text is not UTF-8".into()))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(self.take(nlen)?.to_vec())
                .map_err(|_| MdcError::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = self.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u32()? as usize);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.filter(|&l| l <= (self.buf.len() - self.pos) / 8).ok_or_else(|| {
                MdcError::Checkpoint(format!("tensor {name} extends past the end of the file"))
            })?;
            let data = self.take(len * 8)?.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().expect("8"))).collect();
            out.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(out)
    }
}
