//! `.mtt` multi-tensor container.
//!
//! Little-endian layout: magic `MTT1`, `u32` entry count, then per entry a
//! `u16` name length, the ASCII name, a `u8` dtype code (0=f32, 1=f64,
//! 2=i32, 3=u8), a `u8` rank, `rank × u32` dims and the row-major payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MTT1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bitwise comparison (NaN payloads included).
    pub fn bit_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I32(a), TensorData::I32(b)) => a == b,
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: &[usize], data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("shape {shape:?} vs {} elements", data.len())));
        }
        Ok(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        })
    }

    /// Store a float tensor at its own precision.
    pub fn from_tensor<F: Scalar>(name: impl Into<String>, t: &Tensor<F>) -> Self {
        let data = match F::DTYPE {
            DType::F64 => TensorData::F64(t.data().iter().map(|x| x.f64()).collect()),
            _ => TensorData::F32(t.data().iter().map(|x| x.f64() as f32).collect()),
        };
        NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Convert any numeric payload to a float tensor.
    pub fn to_tensor<F: Scalar>(&self) -> Result<Tensor<F>> {
        let vals: Vec<F> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| F::of(x)).collect(),
            TensorData::I32(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
            TensorData::U8(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
        };
        Tensor::new(&self.shape, vals)
    }

    pub fn bit_eq(&self, other: &NamedTensor) -> bool {
        self.name == other.name && self.shape == other.shape && self.data.bit_eq(&other.data)
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::config("tensor name must not be empty"));
    }
    if !name.is_ascii() {
        return Err(Error::config(format!("tensor name {name:?} is not ASCII")));
    }
    if name.len() > 255 {
        return Err(Error::config(format!("tensor name of {} bytes exceeds 255", name.len())));
    }
    Ok(())
}

pub fn encode(entries: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (i, e) in entries.iter().enumerate() {
        check_name(&e.name)?;
        if entries[..i].iter().any(|p| p.name == e.name) {
            return Err(Error::config(format!("duplicate tensor name {}", e.name)));
        }
        if e.shape.len() > u8::MAX as usize || e.shape.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::shape(format!("{}: shape {:?} not representable", e.name, e.shape)));
        }
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(Error::shape(format!("{}: shape {:?} vs {} elements", e.name, e.shape, e.data.len())));
        }
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.data.dtype() as u8);
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &e.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: at as u64,
            message: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(
                self.pos,
                format!("truncated: {what} needs {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(c.err(0, format!("bad magic {magic:?}")));
    }
    let count = c.u32("entry count")? as usize;
    let mut entries: Vec<NamedTensor> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = c.pos;
        let len = c.u16("name length")? as usize;
        let name_bytes = c.take(len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .ok()
            .filter(|n| !n.is_empty() && n.is_ascii() && n.len() <= 255)
            .ok_or_else(|| c.err(at, "invalid tensor name"))?
            .to_string();
        if entries.iter().any(|e| e.name == name) {
            return Err(c.err(at, format!("duplicate tensor name {name}")));
        }
        let dtype_at = c.pos;
        let code = c.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| c.err(dtype_at, format!("unknown dtype code {code}")))?;
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dim")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)))
            .ok_or_else(|| c.err(at, "payload size overflows"))?;
        let payload = c.take(n.1, "payload")?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
            ),
            DType::F64 => TensorData::F64(
                payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
            ),
            DType::I32 => TensorData::I32(
                payload.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap())).collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        entries.push(NamedTensor { name, shape, data });
    }
    if c.pos != buf.len() {
        return Err(c.err(c.pos, format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(entries)
}

pub fn write_mtt(path: &Path, entries: &[NamedTensor]) -> Result<()> {
    let bytes = encode(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mtt(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn empty_name_rejected() {
        let e = NamedTensor::new("", &[1], TensorData::U8(vec![1])).unwrap();
        assert!(encode(&[e]).is_err());
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = encode(&[]).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        match decode(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_unknown_dtype_are_parse_errors() {
        let e = NamedTensor::new("w", &[2, 2], TensorData::F32(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let bytes = encode(&[e]).unwrap();
        for cut in [3, 7, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Parse { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        // magic(4) + count(4) + len(2) + "w"(1) → dtype byte
        bad[11] = 9;
        match decode(&bad) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 11),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let e = NamedTensor::new("ab", &[3], TensorData::U8(vec![7, 8, 9])).unwrap();
        let bytes = encode(&[e]).unwrap();
        assert_eq!(
            bytes,
            [b'M', b'T', b'T', b'1', 1, 0, 0, 0, 2, 0, b'a', b'b', 3, 1, 3, 0, 0, 0, 7, 8, 9]
        );
    }

    fn arb_entry() -> impl Strategy<Value = NamedTensor> {
        let shape = prop::collection::vec(1usize..5, 0..4);
        (shape, 0u8..4, "[a-z][a-z0-9_.]{0,20}").prop_flat_map(|(shape, code, name)| {
            let n: usize = shape.iter().product();
            let data = match code {
                0 => prop::collection::vec(any::<f32>(), n).prop_map(TensorData::F32).boxed(),
                1 => prop::collection::vec(any::<f64>(), n).prop_map(TensorData::F64).boxed(),
                2 => prop::collection::vec(any::<i32>(), n).prop_map(TensorData::I32).boxed(),
                _ => prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8).boxed(),
            };
            data.prop_map(move |data| NamedTensor {
                name: name.clone(),
                shape: shape.clone(),
                data,
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(entries in prop::collection::vec(arb_entry(), 0..6)) {
            let mut seen = std::collections::HashSet::new();
            let entries: Vec<_> = entries.into_iter().filter(|e| seen.insert(e.name.clone())).collect();
            let back = decode(&encode(&entries).unwrap()).unwrap();
            prop_assert_eq!(back.len(), entries.len());
            for (a, b) in entries.iter().zip(&back) {
                prop_assert!(a.bit_eq(b));
            }
        }
    }
}
