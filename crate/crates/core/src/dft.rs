//! Portable tensor file format used for checkpoints and dataset shards.
//!
//! Layout: magic bytes `DFT1`, one dtype code byte, one rank byte,
//! `rank` little-endian u32 extents, then the raw little-endian values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DFT1";

/// A decoded tensor file; integer payloads carry dataset labels and bytes.
#[derive(Debug, Clone, PartialEq)]
pub enum DftTensor {
    F64(Tensor<f64>),
    F32(Tensor<f32>),
    U32 { shape: Vec<usize>, data: Vec<u32> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl DftTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DftTensor::F64(_) => DType::F64,
            DftTensor::F32(_) => DType::F32,
            DftTensor::U32 { .. } => DType::U32,
            DftTensor::U8 { .. } => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DftTensor::F64(t) => t.shape(),
            DftTensor::F32(t) => t.shape(),
            DftTensor::U32 { shape, .. } => shape,
            DftTensor::U8 { shape, .. } => shape,
        }
    }

    /// Promote any float payload to f64; errors on integer payloads.
    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            DftTensor::F64(t) => Ok(t),
            DftTensor::F32(t) => Ok(t.convert()),
            other => Err(Error::Format(format!(
                "expected float tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn into_u32(self) -> Result<Vec<u32>> {
        match self {
            DftTensor::U32 { data, .. } => Ok(data),
            other => Err(Error::Format(format!(
                "expected u32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }
}

fn write_header(w: &mut impl Write, dtype: DType, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} exceeds u8", shape.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[dtype.code(), shape.len() as u8])?;
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor<E: Scalar>(path: &Path, tensor: &Tensor<E>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, E::DTYPE, tensor.shape())?;
    match E::DTYPE {
        DType::F64 => {
            for v in tensor.data() {
                w.write_all(&v.to_f64().to_le_bytes())?;
            }
        }
        DType::F32 => {
            for v in tensor.data() {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
        }
        _ => unreachable!("float tensors only"),
    }
    w.flush()?;
    Ok(())
}

pub fn write_u32(path: &Path, shape: &[usize], data: &[u32]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::shape("dft.write_u32", format!("{shape:?}")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DType::U32, shape)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<DftTensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 6];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            &head[..4]
        )));
    }
    let dtype = DType::from_code(head[4])
        .ok_or_else(|| Error::Format(format!("{}: unknown dtype code {}", path.display(), head[4])))?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format(format!("{}: truncated extents", path.display())))?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let count: usize = shape.iter().product();
    let mut raw = vec![0u8; count * dtype.byte_width()];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format(format!("{}: truncated payload", path.display())))?;
    let mut trailer = [0u8; 1];
    if r.read(&mut trailer)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }

    Ok(match dtype {
        DType::F64 => {
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            DftTensor::F64(Tensor::new(shape, data)?)
        }
        DType::F32 => {
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            DftTensor::F32(Tensor::new(shape, data)?)
        }
        DType::U32 => {
            let data = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            DftTensor::U32 { shape, data }
        }
        DType::U8 => DftTensor::U8 { shape, data: raw },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dft");
        let t = Tensor::from_vec(vec![2, 3], vec![1.0, -2.5, 0.0, 1e-300, 3.7, 42.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read(&path).unwrap().into_f64().unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn roundtrip_u32_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.dft");
        write_u32(&path, &[4], &[0, 1, 1, 0]).unwrap();
        let back = read(&path).unwrap().into_u32().unwrap();
        assert_eq!(back, vec![0, 1, 1, 0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.dft");
        std::fs::write(&path, b"NOPE\x00\x01\x02\x00\x00\x00").unwrap();
        assert!(matches!(read(&path), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.dft");
        let t = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read(&path), Err(Error::Format(_))));
    }
}
