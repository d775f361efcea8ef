//! Dense row-major tensors generic over the scalar type, plus the TNSR
//! on-disk container.
//!
//! Training runs in f32; gradient checking re-runs the same code in f64.
//! The `Scalar` trait is the small surface the numeric kernels need.

use std::io::Read as _;
use std::path::Path;

use crate::error::{Error, Result};

pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    /// Row-major (last axis fastest).
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same data, new shape; element count must match.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map_scalar<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

// ── TNSR container ──────────────────────────────────────────────────────
//
// magic "TNSR" | u32 version = 1 | u32 rank | u32 extent per axis |
// f32 data, row-major. All integers and floats little-endian.

const TNSR_MAGIC: &[u8; 4] = b"TNSR";
const TNSR_VERSION: u32 = 1;
/// Refuse absurd headers before allocating.
const MAX_ELEMENTS: u64 = 1 << 31;

pub fn write_tnsr<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + tensor.data.len() * 4);
    buf.extend_from_slice(TNSR_MAGIC);
    buf.extend_from_slice(&TNSR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
    for &e in &tensor.shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in &tensor.data {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_tnsr(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tnsr(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_tnsr(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cursor = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated TNSR header".into()))?;
    if &magic != TNSR_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"TNSR\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut cursor)?;
    if version != TNSR_VERSION {
        return Err(Error::Format(format!(
            "unsupported TNSR version {version}, expected {TNSR_VERSION}"
        )));
    }
    let rank = read_u32(&mut cursor)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut total: u64 = 1;
    for _ in 0..rank {
        let e = read_u32(&mut cursor)? as usize;
        total = total.saturating_mul(e as u64);
        shape.push(e);
    }
    if total > MAX_ELEMENTS {
        return Err(Error::Format(format!("element count {total} too large")));
    }
    let mut data = vec![0f32; total as usize];
    let mut raw = vec![0u8; total as usize * 4];
    cursor
        .read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated TNSR payload".into()))?;
    let mut trailing = [0u8; 1];
    if cursor.read(&mut trailing).map_err(|_| Error::Format("read failure".into()))? != 0 {
        return Err(Error::Format("trailing bytes after TNSR payload".into()));
    }
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        data[i] = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
    }
    Tensor::from_vec(&shape, data)
}

pub fn encode_tnsr<T: Scalar>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + tensor.data.len() * 4);
    buf.extend_from_slice(TNSR_MAGIC);
    buf.extend_from_slice(&TNSR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
    for &e in &tensor.shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in &tensor.data {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    buf
}

fn read_u32(cursor: &mut std::io::Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    cursor
        .read_exact(&mut b)
        .map_err(|_| Error::Format("truncated TNSR header".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Serialize into an existing writer (used by the checkpoint container).
pub fn write_tnsr_into<T: Scalar, W: std::io::Write>(w: &mut W, tensor: &Tensor<T>) -> std::io::Result<usize> {
    let buf = encode_tnsr(tensor);
    w.write_all(&buf)?;
    Ok(buf.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tnsr_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::<f32>::from_vec(
            &[2, 3, 2],
            (0..12).map(|i| (i as f32) * 0.37 - 1.4).collect(),
        )
        .unwrap();
        write_tnsr(&path, &t).unwrap();
        let back = read_tnsr(&path).unwrap();
        assert_eq!(back.shape, t.shape);
        let a: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn tnsr_rejects_foreign_magic_and_truncation() {
        let t = Tensor::<f32>::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode_tnsr(&t);
        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"SPKL");
        assert!(matches!(decode_tnsr(&wrong), Err(Error::Format(_))));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_tnsr(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn tnsr_rejects_trailing_garbage() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_tnsr(&t);
        bytes.push(0);
        assert!(matches!(decode_tnsr(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn scalar_round_trip_between_widths() {
        let t64 = Tensor::<f64>::from_vec(&[3], vec![1.5, -2.25, 0.125]).unwrap();
        let t32: Tensor<f32> = t64.map_scalar();
        assert_eq!(t32.data, vec![1.5f32, -2.25, 0.125]);
    }
}
