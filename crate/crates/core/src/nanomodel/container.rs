//! Binary weight containers, little-endian.
//!
//! `QLB1` (full precision):
//! ```text
//! magic "QLB1" | u32 count | per tensor:
//!   u16 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 ndim | u64 dims[ndim] | f32 payload
//! ```
//! `QLQ1` (quantized) uses the same framing. Dense tensors keep dtype 0;
//! quantized tensors use dtype 1 and replace the payload with:
//! ```text
//!   u8 bits | u32 group_size | u8 method (0 rtn, 1 gptq, 2 awq)
//!   u64 code_bytes | codes (rows padded to whole bytes; 4-bit: low nibble = even column)
//!   per (row, group): f32 scale | f32 zero_point
//!   u8 has_channel_scales | [f32 × cols]
//! ```
//! Tensors are written in name order.

use std::fs;
use std::path::Path;

use super::quantize::{QuantizedStore, StoredTensor};
use super::NamedTensorStore;
use crate::error::{QlabError, Result};
use crate::numerics::Matrix;
use crate::quantgrid::{GridParams, Method, QuantizedTensor};

pub const QLB1_MAGIC: &[u8; 4] = b"QLB1";
pub const QLQ1_MAGIC: &[u8; 4] = b"QLQ1";
const DTYPE_F32: u8 = 0;
const DTYPE_QUANT: u8 = 1;

fn put_header(out: &mut Vec<u8>, name: &str, dtype: u8, rows: usize, cols: usize) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| QlabError::Container(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(2);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_qlb1(store: &NamedTensorStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(QLB1_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, m) in store.iter() {
        put_header(&mut out, name, DTYPE_F32, m.rows(), m.cols())?;
        put_f32s(&mut out, m.data());
    }
    Ok(out)
}

pub fn encode_qlq1(store: &QuantizedStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(QLQ1_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        match t {
            StoredTensor::Dense(m) => {
                put_header(&mut out, name, DTYPE_F32, m.rows(), m.cols())?;
                put_f32s(&mut out, m.data());
            }
            StoredTensor::Quantized(q) => {
                q.validate()?;
                put_header(&mut out, name, DTYPE_QUANT, q.rows, q.cols)?;
                out.push(q.bits);
                out.extend_from_slice(&(q.group_size as u32).to_le_bytes());
                out.push(q.method.code());
                out.extend_from_slice(&(q.codes.len() as u64).to_le_bytes());
                out.extend_from_slice(&q.codes);
                for g in &q.group_params {
                    out.extend_from_slice(&g.scale.to_le_bytes());
                    out.extend_from_slice(&(g.zero_point as f32).to_le_bytes());
                }
                match &q.channel_scales {
                    Some(s) => {
                        out.push(1);
                        put_f32s(&mut out, s);
                    }
                    None => out.push(0),
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| QlabError::Container(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| QlabError::Container("dimension overflow".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| QlabError::Container("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn header(&mut self) -> Result<(String, u8, usize, usize)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| QlabError::Container("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = self.u8()?;
        let ndim = self.u8()?;
        if ndim != 2 {
            return Err(QlabError::Container(format!("`{name}`: ndim {ndim}, expected 2")));
        }
        let rows = self.usize()?;
        let cols = self.usize()?;
        Ok((name, dtype, rows, cols))
    }

    fn dense(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| QlabError::Container(format!("`{name}`: size overflow")))?;
        Matrix::new(rows, cols, self.f32s(n)?)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(QlabError::Container(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn check_magic(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<usize> {
    if r.take(4)? != magic {
        return Err(QlabError::Container(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(r.u32()? as usize)
}

pub fn decode_qlb1(bytes: &[u8]) -> Result<NamedTensorStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let count = check_magic(&mut r, QLB1_MAGIC)?;
    let mut store = NamedTensorStore::new();
    for _ in 0..count {
        let (name, dtype, rows, cols) = r.header()?;
        if dtype != DTYPE_F32 {
            return Err(QlabError::Container(format!("`{name}`: dtype {dtype} in QLB1")));
        }
        let m = r.dense(&name, rows, cols)?;
        store.insert(name, m);
    }
    r.finish()?;
    Ok(store)
}

pub fn decode_qlq1(bytes: &[u8]) -> Result<QuantizedStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let count = check_magic(&mut r, QLQ1_MAGIC)?;
    let mut store = QuantizedStore::new();
    for _ in 0..count {
        let (name, dtype, rows, cols) = r.header()?;
        let t = match dtype {
            DTYPE_F32 => StoredTensor::Dense(r.dense(&name, rows, cols)?),
            DTYPE_QUANT => {
                let bits = r.u8()?;
                let group_size = r.u32()? as usize;
                let method = Method::from_code(r.u8()?)
                    .ok_or_else(|| QlabError::Container(format!("`{name}`: unknown method")))?;
                let n_codes = r.usize()?;
                let codes = r.take(n_codes)?.to_vec();
                if group_size == 0 {
                    return Err(QlabError::Container(format!("`{name}`: zero group size")));
                }
                let n_groups = rows * cols.div_ceil(group_size);
                let raw = r.f32s(n_groups * 2)?;
                let group_params = raw
                    .chunks_exact(2)
                    .map(|p| {
                        let zp = p[1];
                        if !(zp >= 0.0 && zp.fract() == 0.0 && zp < 256.0) {
                            return Err(QlabError::Container(format!("`{name}`: bad zero point {zp}")));
                        }
                        Ok(GridParams {
                            scale: p[0],
                            zero_point: zp as u32,
                            bits,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let channel_scales = match r.u8()? {
                    0 => None,
                    1 => Some(r.f32s(cols)?),
                    f => return Err(QlabError::Container(format!("`{name}`: bad scales flag {f}"))),
                };
                let q = QuantizedTensor {
                    rows,
                    cols,
                    bits,
                    group_size,
                    method,
                    codes,
                    group_params,
                    channel_scales,
                };
                q.validate().map_err(|e| QlabError::Container(format!("`{name}`: {e}")))?;
                StoredTensor::Quantized(q)
            }
            other => return Err(QlabError::Container(format!("`{name}`: unknown dtype {other}"))),
        };
        store.insert(name, t);
    }
    r.finish()?;
    Ok(store)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => QlabError::MissingInput(path.to_path_buf()),
        _ => QlabError::Io(e),
    })
}

pub fn save_qlb1(store: &NamedTensorStore, path: &Path) -> Result<()> {
    fs::write(path, encode_qlb1(store)?)?;
    Ok(())
}

pub fn load_qlb1(path: &Path) -> Result<NamedTensorStore> {
    decode_qlb1(&read_file(path)?)
}

pub fn save_qlq1(store: &QuantizedStore, path: &Path) -> Result<()> {
    fs::write(path, encode_qlq1(store)?)?;
    Ok(())
}

pub fn load_qlq1(path: &Path) -> Result<QuantizedStore> {
    decode_qlq1(&read_file(path)?)
}
