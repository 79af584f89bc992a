//! Binary tensor records and named-tensor archives (checkpoints).
//!
//! Tensor record, little-endian:
//!
//! ```text
//! "DTNS" | version u8 (1) | dtype u8 (0 = f32, 1 = f64) | N C H W as u32 | N·C·H·W values
//! ```
//!
//! Archive: `u32` entry count, then per entry a `u32` byte length, the UTF-8
//! name, and one tensor record.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"DTNS";
pub const VERSION: u8 = 1;
/// Bytes before the payload of a tensor record.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 16;

pub fn write_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn tensor_to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(t, &mut out);
    out
}

/// Cursor over a byte buffer that reports absolute offsets in errors.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!(
                    "truncated {what}: expected {len} bytes, {} available",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let start = self.pos;
        if self.take(4, "tensor magic")? != MAGIC {
            return Err(self.fail(start, "bad tensor magic, expected \"DTNS\""));
        }
        let version = self.take(1, "version")?[0];
        if version != VERSION {
            return Err(self.fail(start + 4, format!("unsupported version {version}")));
        }
        let code = self.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| self.fail(start + 5, format!("unknown dtype code {code}")))?;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = self.u32("extent")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let payload = self.take(shape.numel() * dtype.size(), "tensor payload")?;
        let data: Vec<T> = match dtype {
            DType::F32 => payload.chunks_exact(4).map(|b| T::from_f64_lossy(f32::read_le(b) as f64)).collect(),
            DType::F64 => payload.chunks_exact(8).map(|b| T::from_f64_lossy(f64::read_le(b))).collect(),
        };
        Tensor::from_vec(shape, data)
    }
}

/// Decodes one tensor record; trailing bytes are rejected.
pub fn tensor_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(t)
}

/// Ordered list of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive<T> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for Archive<T> {
    fn default() -> Self {
        Archive { entries: Vec::new() }
    }
}

impl<T: Scalar> Archive<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(t, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "entry name")?)
                .map_err(|e| r.fail(at, format!("entry name is not UTF-8: {e}")))?
                .to_owned();
            entries.push((name, r.tensor()?));
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Archive { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -2.0]).unwrap();
        let b = tensor_to_bytes(&t);
        assert_eq!(&b[..4], b"DTNS");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[18..22], &2u32.to_le_bytes());
        assert_eq!(&b[22..26], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), HEADER_LEN + 8);
    }

    #[test]
    fn truncated_record_names_offset() {
        let t = Tensor::<f32>::ones(Shape::new(1, 1, 2, 2));
        let b = tensor_to_bytes(&t);
        let err = tensor_from_bytes::<f32>(&b[..b.len() - 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte 22"), "{msg}");
        assert!(msg.contains("expected 16 bytes, 13 available"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut b = tensor_to_bytes(&Tensor::<f32>::ones(Shape::scalar()));
        b[0] = b'X';
        assert!(tensor_from_bytes::<f32>(&b).is_err());
    }

    proptest! {
        #[test]
        fn archive_round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f32::ANY, 1..40),
            name in "[a-z.]{1,12}",
        ) {
            let t = Tensor::from_vec(Shape::new(1, 1, 1, values.len()), values).unwrap();
            let mut a = Archive::default();
            a.push(name, t);
            let bytes = a.to_bytes();
            let back = Archive::<f32>::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
