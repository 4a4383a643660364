//! The `FMSG` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size      | field                              |
//! |--------|-----------|------------------------------------|
//! | 0      | 4         | magic `b"FMSG"`                    |
//! | 4      | 2         | version, `u16` = 1                 |
//! | 6      | 1         | dtype: 0 = f32, 1 = i32, 2 = u8    |
//! | 7      | 1         | rank                               |
//! | 8      | 4 × rank  | dims, `u32` each, outermost first  |
//! | ...    | payload   | row-major elements                 |
//!
//! Trailing bytes after the payload are rejected.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FMSG";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    I32 = 1,
    U8 = 2,
}

impl DType {
    pub fn element_size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::I32),
            2 => Some(DType::U8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Self> {
        if dims.is_empty() || dims.len() > usize::from(u8::MAX) {
            return Err(Error::shape(format!("unsupported rank {}", dims.len())));
        }
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {dims:?}")));
        }
        let count: usize = dims.iter().map(|&d| d as usize).product();
        if count != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {count} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn u8(dims: Vec<u32>, values: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::U8(values))
    }

    pub fn i32(dims: Vec<u32>, values: Vec<i32>) -> Result<Self> {
        Self::new(dims, TensorData::I32(values))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype() as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format { offset, message };
        if bytes.len() < 8 {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fail(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(bytes[6]).ok_or_else(|| fail(6, format!("unknown dtype code {}", bytes[6])))?;
        let rank = bytes[7] as usize;
        if rank == 0 {
            return Err(fail(7, "rank 0".into()));
        }
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(fail(
                bytes.len(),
                format!("truncated dims, header needs {header} bytes"),
            ));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for i in 0..rank {
            let o = 8 + 4 * i;
            let d = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
            if d == 0 {
                return Err(fail(o, format!("dimension {i} is zero")));
            }
            count = count
                .checked_mul(d as usize)
                .ok_or_else(|| fail(o, "element count overflows".into()))?;
            dims.push(d);
        }
        let payload_len = count * dtype.element_size();
        let expected = header + payload_len;
        if bytes.len() < expected {
            return Err(fail(
                bytes.len(),
                format!("truncated payload, expected {expected} bytes in total"),
            ));
        }
        if bytes.len() > expected {
            return Err(fail(expected, format!("{} trailing bytes", bytes.len() - expected)));
        }
        let payload = &bytes[header..];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }

    /// f32 payload widened to f64.
    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| f64::from(x)).collect()),
            other => Err(Error::validation(format!(
                "expected f32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::decode(&bytes)
}

/// f64 values narrowed to f32 storage.
pub fn f32_tensor(dims: Vec<u32>, values: &[f64]) -> Result<TensorFile> {
    TensorFile::f32(dims, values.iter().map(|&v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f32_roundtrip() {
        let t = TensorFile::f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), 8 + 8 + 16);
        assert_eq!(TensorFile::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn u8_mask_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.fmsg");
        let t = TensorFile::u8(vec![3, 3], vec![1; 9]).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn truncated_by_one_byte() {
        let t = TensorFile::f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = t.encode();
        bytes.pop();
        match TensorFile::decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 31),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_errors_carry_offsets() {
        let t = TensorFile::u8(vec![1], vec![0]).unwrap();
        let mut bytes = t.encode();
        bytes[0] = b'X';
        assert!(matches!(
            TensorFile::decode(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bytes = t.encode();
        bytes[4] = 2;
        assert!(matches!(
            TensorFile::decode(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut bytes = t.encode();
        bytes[6] = 9;
        assert!(matches!(
            TensorFile::decode(&bytes),
            Err(Error::Format { offset: 6, .. })
        ));
        let mut bytes = t.encode();
        bytes.push(0);
        assert!(matches!(
            TensorFile::decode(&bytes),
            Err(Error::Format { offset: 13, .. })
        ));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(TensorFile::u8(vec![0, 3], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_identity(
            dims in prop::collection::vec(1u32..5, 1..4),
            seed in any::<u64>(),
            kind in 0u8..3,
        ) {
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let mut rng = crate::numerics::SeededRng::new(seed);
            let data = match kind {
                0 => TensorData::F32((0..n).map(|_| f32::from_bits(rng.next_u64() as u32)).collect()),
                1 => TensorData::I32((0..n).map(|_| rng.next_u64() as i32).collect()),
                _ => TensorData::U8((0..n).map(|_| rng.next_u64() as u8).collect()),
            };
            let t = TensorFile::new(dims, data).unwrap();
            let bytes = t.encode();
            let back = TensorFile::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
