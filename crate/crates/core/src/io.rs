//! `PQT1` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PQT1" | dtype: u8 (0 = f64, 1 = i64) | rank: u8 | rank x u64 extents | payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{QuantError, Result};
use crate::tensor::{IntTensor, Tensor};

pub const MAGIC: &[u8; 4] = b"PQT1";
pub const DTYPE_F64: u8 = 0;
pub const DTYPE_I64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorFile {
    F64(Tensor),
    I64(IntTensor),
}

impl TensorFile {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorFile::F64(t) => t.shape(),
            TensorFile::I64(t) => t.shape(),
        }
    }

    /// Real view of the payload; integer payloads are converted exactly
    /// while |x| <= 2^53.
    pub fn into_f64(self) -> Tensor {
        match self {
            TensorFile::F64(t) => t,
            TensorFile::I64(t) => t.to_f64(),
        }
    }

    pub fn into_i64(self) -> Result<IntTensor> {
        match self {
            TensorFile::I64(t) => Ok(t),
            TensorFile::F64(t) => {
                let shape = t.shape().to_vec();
                let data = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        if x.fract() == 0.0 && x.abs() <= (1u64 << 53) as f64 {
                            Ok(x as i64)
                        } else {
                            Err(QuantError::Format(format!(
                                "element {i} ({x}) is not an exact integer"
                            )))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                IntTensor::new(data, shape)
            }
        }
    }
}

fn write_header<W: Write>(w: &mut W, dtype: u8, shape: &[usize]) -> Result<()> {
    let rank = u8::try_from(shape.len())
        .map_err(|_| QuantError::Format(format!("rank {} exceeds 255", shape.len())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[dtype, rank])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_header(w, DTYPE_F64, t.shape())?;
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_i64<W: Write>(w: &mut W, t: &IntTensor) -> Result<()> {
    write_header(w, DTYPE_I64, t.shape())?;
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &TensorFile) -> Result<()> {
    match t {
        TensorFile::F64(t) => write_f64(w, t),
        TensorFile::I64(t) => write_i64(w, t),
    }
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<TensorFile> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| QuantError::Format(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(QuantError::Format(format!("bad magic {magic:?}")));
    }
    let mut tag = [0u8; 2];
    r.read_exact(&mut tag)
        .map_err(|e| QuantError::Format(format!("truncated header: {e}")))?;
    let (dtype, rank) = (tag[0], tag[1] as usize);
    let mut shape = Vec::with_capacity(rank);
    let mut buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut buf)
            .map_err(|e| QuantError::Format(format!("truncated extents: {e}")))?;
        let d = usize::try_from(u64::from_le_bytes(buf))
            .map_err(|_| QuantError::Format("extent exceeds usize".into()))?;
        shape.push(d);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| QuantError::Format(format!("shape {shape:?} overflows")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != len * 8 {
        return Err(QuantError::Format(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            payload.len(),
            len * 8
        )));
    }
    let words = payload.chunks_exact(8).map(|c| {
        let mut b = [0u8; 8];
        b.copy_from_slice(c);
        b
    });
    match dtype {
        DTYPE_F64 => Ok(TensorFile::F64(Tensor::new(
            words.map(f64::from_le_bytes).collect(),
            shape,
        )?)),
        DTYPE_I64 => Ok(TensorFile::I64(IntTensor::new(
            words.map(i64::from_le_bytes).collect(),
            shape,
        )?)),
        other => Err(QuantError::Format(format!("unknown dtype tag {other}"))),
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<TensorFile> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

pub fn save(path: impl AsRef<Path>, t: &TensorFile) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn save_f64(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    save(path, &TensorFile::F64(t.clone()))
}

pub fn save_i64(path: impl AsRef<Path>, t: &IntTensor) -> Result<()> {
    save(path, &TensorFile::I64(t.clone()))
}
