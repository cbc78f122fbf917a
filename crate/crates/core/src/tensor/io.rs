//! "CVT1" tensor file format: magic `CVT1`, u8 dtype code (0=f32, 1=f64),
//! u8 rank, rank x u32 little-endian dims, then row-major little-endian
//! values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CVT1";

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + S::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(S::DTYPE.code());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode<S: Scalar>(bytes: &[u8], origin: &str) -> Result<Tensor<S>> {
    let fail = |detail: String| Error::format(origin, detail);
    if bytes.len() < 6 {
        return Err(fail(format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic, expected CVT1".to_string()));
    }
    let dtype = Dtype::from_code(bytes[4])
        .ok_or_else(|| fail(format!("unknown dtype code {}", bytes[4])))?;
    if dtype != S::DTYPE {
        return Err(fail(format!(
            "dtype is {}, expected {}",
            dtype.name(),
            S::DTYPE.name()
        )));
    }
    let rank = bytes[5] as usize;
    let dims_end = 6 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fail("truncated dimension list".to_string()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 6 + 4 * i;
        shape.push(u32::from_le_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]) as usize);
    }
    let numel: usize = shape.iter().product();
    let expected = dims_end + numel * S::BYTES;
    if bytes.len() != expected {
        return Err(fail(format!(
            "payload length {} does not match shape {:?} ({} expected)",
            bytes.len(),
            shape,
            expected
        )));
    }
    let data: Vec<S> = bytes[dims_end..]
        .chunks_exact(S::BYTES)
        .map(S::read_le)
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor<S: Scalar>(t: &Tensor<S>, path: &Path) -> Result<()> {
    let bytes = encode(t);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let t = Tensor::<f64>::from_fn(&[3, 5], |i| (i as f64).exp() * 1e-3 - 0.7);
        let back: Tensor<f64> = decode(&encode(&t), "mem").unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn truncated_input_is_rejected_without_partial_tensor() {
        let t = Tensor::<f32>::from_fn(&[4, 4], |i| i as f32);
        let mut bytes = encode(&t);
        bytes.truncate(bytes.len() - 3);
        let err = decode::<f32>(&bytes, "mem").unwrap_err();
        assert!(err.to_string().contains("does not match shape"), "{err}");
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let t = Tensor::<f32>::from_fn(&[2], |i| i as f32);
        let err = decode::<f64>(&encode(&t), "mem").unwrap_err();
        assert!(err.to_string().contains("dtype"), "{err}");
    }
}
