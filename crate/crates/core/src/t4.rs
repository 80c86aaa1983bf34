//! T4 tensor files: `"T4\n"`, dtype byte, rank byte, rank × u64 LE dims,
//! then the row-major LE payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{IdGrid, LabelMap};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 3] = b"T4\n";
pub const MAX_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    I32 = 1,
    U8 = 2,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::I32),
            2 => Ok(Dtype::U8),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum T4Data {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl T4Data {
    pub fn dtype(&self) -> Dtype {
        match self {
            T4Data::F32(_) => Dtype::F32,
            T4Data::I32(_) => Dtype::I32,
            T4Data::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            T4Data::F32(v) => v.len(),
            T4Data::I32(v) => v.len(),
            T4Data::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One decoded T4 record. Equality on `F32` payloads is bitwise.
#[derive(Clone, Debug)]
pub struct T4 {
    dims: Vec<usize>,
    data: T4Data,
}

impl PartialEq for T4 {
    fn eq(&self, other: &Self) -> bool {
        if self.dims != other.dims {
            return false;
        }
        match (&self.data, &other.data) {
            (T4Data::F32(a), T4Data::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (a, b) => a == b,
        }
    }
}

/// Fixed-size prefix length for a record of the given rank.
pub fn header_len(rank: usize) -> usize {
    MAGIC.len() + 2 + 8 * rank
}

impl T4 {
    pub fn new(dims: &[usize], data: T4Data) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::Format(format!("rank {} exceeds {MAX_RANK}", dims.len())));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {numel} elements but payload has {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &T4Data {
        &self.data
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        Self {
            dims: t.shape().to_vec(),
            data: T4Data::F32(t.data().to_vec()),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        match &self.data {
            T4Data::F32(v) => Tensor::new(&self.dims, v.clone()),
            _ => Err(Error::Format(format!("expected f32 payload, found {:?}", self.dtype()))),
        }
    }

    /// Rank-2 u8 record of any id grid.
    pub fn from_grid<G: IdGrid>(grid: &G) -> Self {
        Self {
            dims: vec![grid.height(), grid.width()],
            data: T4Data::U8(grid.ids().to_vec()),
        }
    }

    pub fn to_label_map(&self) -> Result<LabelMap> {
        match (&self.data, &self.dims[..]) {
            (T4Data::U8(v), &[h, w]) => LabelMap::new(h, w, v.clone()),
            _ => Err(Error::Format(format!(
                "expected rank-2 u8 labels, found {:?} with dims {:?}",
                self.dtype(),
                self.dims
            ))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(header_len(self.dims.len()) + self.data.len() * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            T4Data::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            T4Data::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            T4Data::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Decodes one record from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let (dtype, dims) = decode_header(bytes)?;
        let start = header_len(dims.len());
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let expected = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let found = bytes.len() - start;
        if found < expected {
            return Err(Error::Truncated { expected, found });
        }
        let payload = &bytes[start..start + expected];
        let data = match dtype {
            Dtype::F32 => T4Data::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            Dtype::I32 => T4Data::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            Dtype::U8 => T4Data::U8(payload.to_vec()),
        };
        Ok((Self { dims, data }, start + expected))
    }

    /// Decodes exactly one record; trailing bytes are an error.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - used
            )));
        }
        Ok(t)
    }
}

/// Parses magic, dtype, and dims without touching the payload.
pub fn decode_header(bytes: &[u8]) -> Result<(Dtype, Vec<usize>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let fixed = MAGIC.len() + 2;
    if bytes.len() < fixed {
        return Err(Error::Truncated {
            expected: fixed,
            found: bytes.len(),
        });
    }
    let dtype = Dtype::from_code(bytes[3])?;
    let rank = bytes[4] as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let need = header_len(rank);
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    let dims = bytes[fixed..need]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")) as usize)
        .collect();
    Ok((dtype, dims))
}

pub fn write_t4(path: impl AsRef<Path>, t: &T4) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_t4(path: impl AsRef<Path>) -> Result<T4> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    T4::decode(&bytes)
}

/// Reads only the header of a file.
pub fn read_t4_header(path: impl AsRef<Path>) -> Result<(Dtype, Vec<usize>)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(header_len(MAX_RANK));
    fs::File::open(path)
        .and_then(|f| f.take(header_len(MAX_RANK) as u64).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_header(&buf)
}
