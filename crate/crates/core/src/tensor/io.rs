//! `ODT1` container: magic, u8 dtype, u8 rank, rank x u32 LE dims, raw LE payload.

use std::io::{Read, Write};

use super::Float;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ODT1";
/// Refuse payloads above this many elements (guards against corrupt headers).
const MAX_ELEMENTS: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    Float { shape: Vec<usize>, data: Vec<Float> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

fn write_header<W: Write>(w: &mut W, dtype: DType, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", shape.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[dtype as u8, shape.len() as u8])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

/// Writes floats at the engine's native width.
pub fn write_float_tensor<W: Write>(w: &mut W, shape: &[usize], data: &[Float]) -> Result<()> {
    check(shape, data.len())?;
    #[cfg(not(feature = "f64"))]
    let dtype = DType::F32;
    #[cfg(feature = "f64")]
    let dtype = DType::F64;
    write_header(w, dtype, shape)?;
    let mut buf = Vec::with_capacity(data.len() * dtype.width());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_u8_tensor<W: Write>(w: &mut W, shape: &[usize], data: &[u8]) -> Result<()> {
    check(shape, data.len())?;
    write_header(w, DType::U8, shape)?;
    w.write_all(data)?;
    Ok(())
}

fn check(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Format(format!("shape {shape:?} holds {n} elements, got {len}")));
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

/// Reads one container. Nothing is returned unless the whole payload is present.
pub fn read_container<R: Read>(r: &mut R) -> Result<Stored> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut hdr = [0u8; 2];
    read_exact(r, &mut hdr, "header")?;
    let dtype = DType::from_code(hdr[0])?;
    let rank = hdr[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        read_exact(r, &mut d, "dims")?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Format(format!("implausible shape {shape:?}")))?;
    let mut payload = vec![0u8; n * dtype.width()];
    read_exact(r, &mut payload, "payload")?;
    Ok(match dtype {
        DType::U8 => Stored::U8 { shape, data: payload },
        DType::F32 => Stored::Float {
            shape,
            data: payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Float)
                .collect(),
        },
        DType::F64 => Stored::Float {
            shape,
            data: payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Float)
                .collect(),
        },
    })
}

pub fn read_float_tensor<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<Float>)> {
    match read_container(r)? {
        Stored::Float { shape, data } => Ok((shape, data)),
        Stored::U8 { .. } => Err(Error::Format("expected a float tensor, found u8".into())),
    }
}
