//! Versioned binary container for parameter sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DMTLR1"  u32 version  u64 header_len  header (UTF-8 JSON)  u8 frozen
//! u32 section_count
//!   per section: u32 tag_len  tag  u32 set_count
//!     per set: u8 trainable  tensor(weights)  tensor(biases)
//! tensor: u32 ndim  u64 dims[ndim]  f64 data[product(dims)]
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"DMTLR1";
pub const VERSION: u32 = 1;

/// Section tags of the four parameter groups.
pub const W_F: &str = "w_f";
pub const W_FT: &str = "w_FT";
pub const W_MLP: &str = "w_MLP";
pub const W_R: &str = "w_r";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub frozen: bool,
    pub sections: Vec<(String, Vec<ParamSet>)>,
}

impl Checkpoint {
    pub fn section(&self, tag: &str) -> Option<&[ParamSet]> {
        self.sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, sets)| sets.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = self.header.to_string();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.push(self.frozen as u8);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (tag, sets) in &self.sections {
            out.extend_from_slice(&(tag.len() as u32).to_le_bytes());
            out.extend_from_slice(tag.as_bytes());
            out.extend_from_slice(&(sets.len() as u32).to_le_bytes());
            for set in sets {
                out.push(set.trainable as u8);
                put_tensor(&mut out, &set.weights);
                put_tensor(&mut out, &set.biases);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a DMTLR1 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let frozen = r.u8()? != 0;
        let n_sections = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let tag_len = r.u32()? as usize;
            let tag = String::from_utf8(r.take(tag_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("section tag is not UTF-8".into()))?;
            let n_sets = r.u32()?;
            let mut sets = Vec::new();
            for _ in 0..n_sets {
                let trainable = r.u8()? != 0;
                let weights = r.tensor()?;
                let biases = r.tensor()?;
                let mut set = ParamSet::new(weights, biases);
                set.trainable = trainable;
                sets.push(set);
            }
            sections.push((tag, sets));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            header,
            frozen,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = self.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// SHA-256 over the shapes and exact bit patterns of a list of parameter
/// sets, as lowercase hex.
pub fn hash_params<'a>(sets: impl IntoIterator<Item = &'a ParamSet>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for set in sets {
        buf.clear();
        put_tensor(&mut buf, &set.weights);
        put_tensor(&mut buf, &set.biases);
        h.update(&buf);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
