//! Binary tensor files and the named-section checkpoint container.
//!
//! Tensor format: magic `ICEE`, u32 version = 1, u32 rank, u64 dims[rank],
//! then the row-major payload as little-endian f64.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"ICEE";
const SECTIONS_MAGIC: &[u8; 4] = b"ICKS";
const VERSION: u32 = 1;

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.shape().len() + 8 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of tensor data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_tensor_at(cur: &mut Cursor) -> Result<Tensor> {
    let magic = cur.take(4)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let rank = cur.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u128 = 1;
    for _ in 0..rank {
        let d = cur.u64()? as usize;
        numel *= d as u128;
        if numel > (1 << 34) {
            return Err(Error::Format("tensor dimensions overflow".into()));
        }
        shape.push(d);
    }
    let n = numel as usize;
    let raw = cur.take(8 * n)?;
    let mut data = Vec::with_capacity(n);
    for chunk in raw.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Tensor::from_vec(&shape, data)
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let t = read_tensor_at(&mut cur)?;
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&tensor_to_bytes(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    tensor_from_bytes(&buf)
}

/// Write a checkpoint: a JSON header followed by named tensor sections.
pub fn write_sections(path: &Path, header_json: &str, sections: &[(&str, &Tensor)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(SECTIONS_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(header_json.as_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, tensor) in sections {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&tensor_to_bytes(tensor));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read a checkpoint written by [`write_sections`]. Returns the header JSON
/// and the sections in file order.
pub fn read_sections(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != SECTIONS_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    if cur.u32()? != VERSION {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    let header_len = cur.u64()? as usize;
    let header = String::from_utf8(cur.take(header_len)?.to_vec())
        .map_err(|_| Error::Format("checkpoint header is not utf-8".into()))?;
    let n = cur.u32()? as usize;
    let mut sections = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("section name is not utf-8".into()))?;
        let tensor = read_tensor_at(&mut cur)?;
        sections.push((name, tensor));
    }
    Ok((header, sections))
}

/// Look up a section by name in a decoded checkpoint.
pub fn take_section(sections: &[(String, Tensor)], name: &str) -> Result<Tensor> {
    sections
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Format(format!("checkpoint missing section '{name}'")))
}
