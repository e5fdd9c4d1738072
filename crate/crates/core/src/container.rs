//! UCFA v1 tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! 0..4   b"UCFA"
//! 4      version (1)
//! 5      dtype   (1 = f32 LE)
//! 6..8   zero
//! 8..12  u32 tensor_count
//! per tensor:
//!        u16 name_len, name (UTF-8), u8 rank, rank x u32 dims, row-major f32 payload
//! ```
//!
//! Tensors are written in name order, so encoding a map is deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UCFA";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const MAX_RANK: usize = 3;

/// A dense f32 tensor of rank 0..=3.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

pub type TensorMap = BTreeMap<String, Tensor>;

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::data(format!(
                "tensor rank {} exceeds {MAX_RANK}",
                dims.len()
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::data(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<f32>) -> Self {
        Tensor {
            dims: vec![values.len()],
            data: values,
        }
    }

    /// Rounds each value to f32.
    pub fn from_array2(a: &Array2<f64>) -> Self {
        Tensor {
            dims: vec![a.nrows(), a.ncols()],
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_array1(a: &Array1<f64>) -> Self {
        Tensor::vector(a.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Views a rank-2 tensor (or a rank-1 tensor as a single row) as f64.
    pub fn to_array2(&self) -> Result<Array2<f64>> {
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::data(format!(
                    "expected a rank-1 or rank-2 tensor, got dims {other:?}"
                )))
            }
        };
        let v: Vec<f64> = self.data.iter().map(|&x| x as f64).collect();
        Array2::from_shape_vec((r, c), v).map_err(|e| Error::data(e.to_string()))
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

fn check_tensor(name: &str, t: &Tensor) -> Result<()> {
    if t.rank() > MAX_RANK {
        return Err(Error::data(format!(
            "tensor '{name}' has rank {} > {MAX_RANK}",
            t.rank()
        )));
    }
    if let Some(i) = t.first_non_finite() {
        return Err(Error::data(format!(
            "tensor '{name}' holds a non-finite value at element {i}"
        )));
    }
    Ok(())
}

pub fn encode(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, 0, 0]);
    let count = u32::try_from(tensors.len()).map_err(|_| Error::data("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        check_tensor(name, t)?;
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::data(format!("tensor name '{name}' longer than 65535 bytes")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in &t.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::data(format!("tensor '{name}' dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(t.data.len() * 4);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::data(format!(
                "truncated {what} at offset {} (need {n} bytes, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
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

pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::data("bad magic at offset 0"));
    }
    let version = cur.u8("version")?;
    if version != VERSION {
        return Err(Error::data(format!(
            "unsupported version {version} at offset 4"
        )));
    }
    let dtype = cur.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::data(format!("unsupported dtype {dtype} at offset 5")));
    }
    let reserved = cur.take(2, "reserved bytes")?;
    if reserved != [0, 0] {
        return Err(Error::data("non-zero reserved bytes at offset 6"));
    }
    let count = cur.u32("tensor count")?;

    let mut map = TensorMap::new();
    for _ in 0..count {
        let at = cur.pos;
        let name_len = cur.u16("name length")? as usize;
        let name_bytes = cur.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::data(format!("tensor name is not UTF-8 at offset {}", at + 2)))?
            .to_string();
        let rank_at = cur.pos;
        let rank = cur.u8("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::data(format!(
                "tensor '{name}' has rank {rank} > {MAX_RANK} at offset {rank_at}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("dimension")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::data(format!("tensor '{name}' size overflows")))?;
        let payload_at = cur.pos;
        let payload = cur.take(numel, &format!("payload of tensor '{name}'"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor { dims, data };
        if let Some(i) = t.first_non_finite() {
            return Err(Error::data(format!(
                "tensor '{name}' holds a non-finite value at offset {}",
                payload_at + 4 * i
            )));
        }
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::data(format!(
                "duplicate tensor name '{name}' at offset {at}"
            )));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::data(format!(
            "{} trailing bytes at offset {}",
            bytes.len() - cur.pos,
            cur.pos
        )));
    }
    Ok(map)
}

pub fn write_container(tensors: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
