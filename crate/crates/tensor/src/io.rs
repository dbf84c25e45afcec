//! Tensor serialization: magic "LTSR", u8 rank, u32 little-endian extents,
//! then raw 32-bit little-endian floats in row-major order.

use std::io::{Read, Write};

use crate::error::TensorError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LTSR";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<(), TensorError> {
    if t.shape().len() > u8::MAX as usize {
        return Err(TensorError::Format(format!("rank {} exceeds u8", t.shape().len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[t.shape().len() as u8])?;
    for &ext in t.shape() {
        if ext > u32::MAX as usize {
            return Err(TensorError::Format(format!("extent {ext} exceeds u32")));
        }
        w.write_all(&(ext as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut ext = [0u8; 4];
        r.read_exact(&mut ext)?;
        shape.push(u32::from_le_bytes(ext) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&shape, data)
}

/// Serialized byte length of a tensor record.
pub fn byte_len(t: &Tensor<f32>) -> usize {
    4 + 1 + 4 * t.shape().len() + 4 * t.numel()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let t = Tensor::from_vec(&[2, 3, 1], vec![1.0, -2.5, 0.0, 3.25, 1e-8, -1e8]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), byte_len(&t));
        assert_eq!(&buf[..4], MAGIC);
        assert_eq!(buf[4], 3); // rank
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"XXXX\x01\x01\x00\x00\x00\x00\x00\x80\x3f".to_vec();
        assert!(matches!(
            read_tensor(&mut buf.as_slice()),
            Err(TensorError::Format(_))
        ));
    }
}
