//! Binary tensor format used for fixtures and golden files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "LTNS" | u8 version = 1 | u8 dtype (0 = f64, 1 = f32) | u8 rank
//!        | u64 extents[rank] | row-major payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{LambdaError, Result};
use crate::scalar::{Dtype, Scalar};

pub const MAGIC: &[u8; 4] = b"LTNS";
pub const VERSION: u8 = 1;

/// A tensor read from disk, in whichever precision it was stored.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F64(Tensor<f64>),
    F32(Tensor<f32>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F64(_) => Dtype::F64,
            AnyTensor::F32(_) => Dtype::F32,
        }
    }

    /// Converts to reference precision.
    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            AnyTensor::F64(t) => t.clone(),
            AnyTensor::F32(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + T::DTYPE.size_of() * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

pub fn write_tensor<T: Scalar, W: Write>(mut w: W, t: &Tensor<T>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(LambdaError::Format(format!("rank {} does not fit in a u8", t.rank())));
    }
    w.write_all(&encode(t))?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(LambdaError::Format(format!("truncated input while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn decode_payload<T: Scalar>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size_of();
    let len: usize = shape.iter().product();
    if payload.len() != len * size {
        return Err(LambdaError::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            len * size
        )));
    }
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode(mut bytes: &[u8]) -> Result<AnyTensor> {
    if take(&mut bytes, 4, "magic")? != MAGIC {
        return Err(LambdaError::Format("bad magic, expected \"LTNS\"".into()));
    }
    let header = take(&mut bytes, 3, "header")?;
    if header[0] != VERSION {
        return Err(LambdaError::Format(format!("unsupported version {}", header[0])));
    }
    let dtype = Dtype::from_code(header[1])
        .ok_or_else(|| LambdaError::Format(format!("unknown dtype code {}", header[1])))?;
    let rank = header[2] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = take(&mut bytes, 8, "extent")?;
        let e = u64::from_le_bytes(raw.try_into().unwrap());
        shape.push(usize::try_from(e).map_err(|_| LambdaError::Format(format!("extent {e} too large")))?);
    }
    Ok(match dtype {
        Dtype::F64 => AnyTensor::F64(decode_payload(shape, bytes)?),
        Dtype::F32 => AnyTensor::F32(decode_payload(shape, bytes)?),
    })
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_tensor(std::io::BufWriter::new(file), t)
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    read_tensor(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        let mut expected = b"LTNS".to_vec();
        expected.extend_from_slice(&[1, 1, 1]);
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn scalar_and_errors() {
        let s = Tensor::<f64>::scalar(3.25);
        assert_eq!(decode(&encode(&s)).unwrap(), AnyTensor::F64(s));
        let mut bad = encode(&Tensor::<f64>::zeros(&[3]));
        bad.pop();
        assert!(matches!(decode(&bad), Err(LambdaError::Format(_))));
        assert!(matches!(decode(b"XTNS\x01\x00\x00"), Err(LambdaError::Format(_))));
        assert!(matches!(decode(b"LTNS\x01\x07\x00"), Err(LambdaError::Format(_))));
    }
}
