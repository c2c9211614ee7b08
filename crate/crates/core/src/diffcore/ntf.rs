//! Flat binary tensor files.
//!
//! Layout, all little-endian:
//! `"NTF1"` magic, `u8` dtype (0 = f32, 1 = f64), `u8` rank,
//! rank x `u32` extents, then the row-major payload.
//! Rank 0 is a scalar with a single payload element.
//!
//! Readers and writers reject non-finite payloads; every map and mask in
//! the pipeline is supposed to be finite, including sentinel values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::tensor::{Dtype, Element, Tensor};

const MAGIC: [u8; 4] = *b"NTF1";
/// Refuse absurd headers before allocating (2^31 elements).
const MAX_ELEMENTS: u64 = 1 << 31;

#[derive(Debug, Error)]
pub enum NtfError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"NTF1\"")]
    BadMagic([u8; 4]),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("stored dtype {got:?} does not match requested {want:?}")]
    DtypeMismatch { want: Dtype, got: Dtype },
    #[error("header declares {0} elements, refusing")]
    TooLarge(u64),
    #[error("payload contains a non-finite value at index {0}")]
    NonFinite(usize),
}

pub fn write_ntf<T: Element>(path: &Path, t: &Tensor<T>) -> Result<(), NtfError> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(NtfError::NonFinite(i));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_u8(T::DTYPE as u8)?;
    w.write_u8(t.shape().len() as u8)?;
    for &e in t.shape() {
        w.write_u32::<LittleEndian>(e as u32)?;
    }
    match T::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v.to_f64() as f32)?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v.to_f64())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<(Dtype, Vec<usize>), NtfError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(NtfError::BadMagic(magic));
    }
    let dtype = match r.read_u8()? {
        0 => Dtype::F32,
        1 => Dtype::F64,
        t => return Err(NtfError::BadDtype(t)),
    };
    let rank = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut total: u64 = 1;
    for _ in 0..rank {
        let e = r.read_u32::<LittleEndian>()? as u64;
        total = total.saturating_mul(e);
        shape.push(e as usize);
    }
    if total > MAX_ELEMENTS {
        return Err(NtfError::TooLarge(total));
    }
    Ok((dtype, shape))
}

/// Strict read: the stored dtype must match `T`.
pub fn read_ntf<T: Element>(path: &Path) -> Result<Tensor<T>, NtfError> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, shape) = read_header(&mut r)?;
    if dtype != T::DTYPE {
        return Err(NtfError::DtypeMismatch { want: T::DTYPE, got: dtype });
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match T::DTYPE {
        Dtype::F32 => {
            for _ in 0..n {
                data.push(T::from_f64(r.read_f32::<LittleEndian>()? as f64));
            }
        }
        Dtype::F64 => {
            for _ in 0..n {
                data.push(T::from_f64(r.read_f64::<LittleEndian>()?));
            }
        }
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(NtfError::NonFinite(i));
    }
    Ok(Tensor::new(shape, data))
}

/// Convenience read that accepts either stored dtype and narrows to f32.
pub fn read_ntf_f32(path: &Path) -> Result<Tensor<f32>, NtfError> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, shape) = read_header(&mut r)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            for _ in 0..n {
                data.push(r.read_f32::<LittleEndian>()?);
            }
        }
        Dtype::F64 => {
            for _ in 0..n {
                data.push(r.read_f64::<LittleEndian>()? as f32);
            }
        }
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(NtfError::NonFinite(i));
    }
    Ok(Tensor::new(shape, data))
}
