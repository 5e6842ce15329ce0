//! Little-endian binary containers.
//!
//! Layout: 4 magic bytes, `u32` rank, `rank` x `u64` dims, a fixed number of
//! `f64` header scalars (known per magic), then row-major `f64` payload whose
//! length is the product of the dims.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Circulant operator eigenvalues; one header scalar (kernel std).
pub const OPERATOR_MAGIC: [u8; 4] = *b"WSK1";
/// Generic real tensors (trajectories, measurements, reconstructions); one header scalar.
pub const TENSOR_MAGIC: [u8; 4] = *b"WST1";
/// Model checkpoints; dims are the layer widths, no header scalars.
pub const MODEL_MAGIC: [u8; 4] = *b"WSM1";
/// Optimizer sidecar for resumable training; header holds the step count.
pub const OPTIMIZER_MAGIC: [u8; 4] = *b"WSO1";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub magic: [u8; 4],
    pub dims: Vec<u64>,
    pub header: Vec<f64>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(8 + 8 * (self.dims.len() + self.header.len() + self.data.len()));
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in self.header.iter().chain(&self.data) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes `bytes`, expecting `magic` and `header_len` header scalars.
    ///
    /// For `MODEL_MAGIC` the payload length is not the product of the dims, so
    /// pass `payload_len = None` to accept whatever remains.
    pub fn decode(
        bytes: &[u8],
        magic: [u8; 4],
        header_len: usize,
        payload_len: Option<usize>,
    ) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let got = cur.take(4)?;
        if got != magic {
            return Err(Error::Container(format!(
                "magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(&magic)
            )));
        }
        let rank = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        let mut header = Vec::with_capacity(header_len);
        for _ in 0..header_len {
            header.push(cur.f64()?);
        }
        let remaining = (bytes.len() - cur.pos) / 8;
        if (bytes.len() - cur.pos) % 8 != 0 {
            return Err(Error::Container("trailing bytes".into()));
        }
        let expected = match payload_len {
            Some(n) => n,
            None if magic == MODEL_MAGIC => remaining,
            None => dims.iter().product::<u64>() as usize,
        };
        if remaining != expected {
            return Err(Error::Container(format!(
                "payload has {remaining} values, expected {expected}"
            )));
        }
        let mut data = Vec::with_capacity(expected);
        for _ in 0..expected {
            data.push(cur.f64()?);
        }
        Ok(Record {
            magic,
            dims,
            header,
            data,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(
        path: impl AsRef<Path>,
        magic: [u8; 4],
        header_len: usize,
        payload_len: Option<usize>,
    ) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes, magic, header_len, payload_len)
    }
}

/// Writes a plain tensor container (`WST1`).
pub fn write_tensor(path: impl AsRef<Path>, dims: &[usize], scalar: f64, data: &[f64]) -> Result<()> {
    Record {
        magic: TENSOR_MAGIC,
        dims: dims.iter().map(|&d| d as u64).collect(),
        header: vec![scalar],
        data: data.to_vec(),
    }
    .write(path)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<usize>, f64, Vec<f64>)> {
    let rec = Record::read(path, TENSOR_MAGIC, 1, None)?;
    Ok((
        rec.dims.iter().map(|&d| d as usize).collect(),
        rec.header[0],
        rec.data,
    ))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Container("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
