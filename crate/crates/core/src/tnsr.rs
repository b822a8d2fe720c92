//! `TNSR` binary tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "TNSR" | version: u32 (=1) | dtype: u8 | ndim: u8 (=2) | dims: ndim × u64 | data
//! ```
//!
//! dtype codes: 0 = f64, 1 = i8, 2 = i32, 3 = f32. Data is row-major with no
//! padding and nothing may follow it. Decoding then encoding reproduces the
//! input bytes exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FloatMatrix, IntMatrix};

pub const MAGIC: [u8; 4] = *b"TNSR";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    I8 = 1,
    I32 = 2,
    F32 = 3,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F64),
            1 => Ok(DType::I8),
            2 => Ok(DType::I32),
            3 => Ok(DType::F32),
            other => Err(Error::format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::I8 => 1,
            DType::I32 | DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I8(Vec<i8>),
    I32(Vec<i32>),
    F32(Vec<f32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F64(_) => DType::F64,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
            TensorData::F32(_) => DType::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A rank-2 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: TensorData,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: TensorData) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::shape(format!(
                "{rows}x{cols} tensor cannot hold {} elements",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn from_float(m: &FloatMatrix) -> Self {
        Self { rows: m.rows(), cols: m.cols(), data: TensorData::F64(m.data().to_vec()) }
    }

    /// Stores as i8 when the matrix width allows it, otherwise as i32.
    pub fn from_int(m: &IntMatrix) -> Result<Self> {
        let data = if m.bits() <= 8 {
            TensorData::I8(m.data().iter().map(|&v| v as i8).collect())
        } else if m.bits() <= 32 {
            TensorData::I32(m.data().iter().map(|&v| v as i32).collect())
        } else {
            return Err(Error::BitWidth(m.bits()));
        };
        Ok(Self { rows: m.rows(), cols: m.cols(), data })
    }

    /// Float view of the tensor; integer data converts exactly.
    pub fn to_float(&self) -> Result<FloatMatrix> {
        let values = match &self.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
        };
        FloatMatrix::new(self.rows, self.cols, values)
    }

    /// Integer view with the given symmetric width. Float data is rejected.
    pub fn to_int(&self, bits: u32) -> Result<IntMatrix> {
        let values = match &self.data {
            TensorData::I8(v) => v.iter().map(|&x| x as i64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as i64).collect(),
            _ => return Err(Error::format("tensor does not hold integers")),
        };
        IntMatrix::new(self.rows, self.cols, bits, values)
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out = Vec::with_capacity(HEADER_LEN + 16 + self.data.len() * dtype.size());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype.code());
        out.push(2);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        match &self.data {
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format("truncated header"));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::format("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(bytes[8])?;
        let ndim = bytes[9] as usize;
        if ndim != 2 {
            return Err(Error::format(format!("only rank-2 tensors are supported, got {ndim}")));
        }
        let dims_end = HEADER_LEN + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::format("truncated dimensions"));
        }
        let dim = |i: usize| {
            let at = HEADER_LEN + 8 * i;
            let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            usize::try_from(d).map_err(|_| Error::format("dimension too large"))
        };
        let (rows, cols) = (dim(0)?, dim(1)?);
        let payload = &bytes[dims_end..];
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::format("dimensions overflow"))?;
        if payload.len() != expected {
            return Err(Error::format(format!(
                "expected {expected} data bytes, found {}",
                payload.len()
            )));
        }
        let data = match dtype {
            DType::F64 => TensorData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::I8 => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
            DType::I32 => TensorData::I32(
                payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        Ok(Self { rows, cols, data })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::decode(&fs::read(path)?)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    fs::write(path, tensor.encode())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(1, 2, TensorData::I8(vec![-1, 7])).unwrap();
        let bytes = t.encode();
        let mut expected = b"TNSR".to_vec();
        expected.extend([1, 0, 0, 0, 1, 2]);
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend([0xff, 7]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_corruption() {
        let good = Tensor::from_float(&FloatMatrix::identity(2)).encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::decode(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(Tensor::decode(&bad).is_err());
        let mut bad = good.clone();
        bad[8] = 9;
        assert!(Tensor::decode(&bad).is_err());
        let mut bad = good.clone();
        bad[9] = 3;
        assert!(Tensor::decode(&bad).is_err());
        assert!(Tensor::decode(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad.push(0);
        assert!(Tensor::decode(&bad).is_err());
        assert!(Tensor::decode(&good[..6]).is_err());
    }

    #[test]
    fn int_conversion_picks_width() {
        let m = IntMatrix::new(1, 2, 8, vec![-127, 5]).unwrap();
        let t = Tensor::from_int(&m).unwrap();
        assert_eq!(t.dtype(), DType::I8);
        assert_eq!(t.to_int(8).unwrap(), m);
        let m = IntMatrix::new(1, 1, 32, vec![1 << 20]).unwrap();
        assert_eq!(Tensor::from_int(&m).unwrap().dtype(), DType::I32);
        assert!(Tensor::from_float(&FloatMatrix::zeros(1, 1)).to_int(8).is_err());
    }

    #[test]
    fn non_finite_payload_round_trips_but_is_not_a_float_matrix() {
        let t = Tensor::new(1, 1, TensorData::F64(vec![f64::NAN])).unwrap();
        let bytes = t.encode();
        assert_eq!(Tensor::decode(&bytes).unwrap().encode(), bytes);
        assert!(matches!(t.to_float(), Err(Error::NonFinite { .. })));
    }

    fn any_data() -> impl Strategy<Value = (usize, usize, TensorData)> {
        (0usize..5, 0usize..5).prop_flat_map(|(r, c)| {
            let n = r * c;
            prop_oneof![
                prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n).prop_map(TensorData::F64),
                prop::collection::vec(any::<i8>(), n).prop_map(TensorData::I8),
                prop::collection::vec(any::<i32>(), n).prop_map(TensorData::I32),
                prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n).prop_map(TensorData::F32),
            ]
            .prop_map(move |d| (r, c, d))
        })
    }

    proptest! {
        #[test]
        fn decode_encode_is_identity((r, c, data) in any_data()) {
            let bytes = Tensor::new(r, c, data).unwrap().encode();
            prop_assert_eq!(Tensor::decode(&bytes).unwrap().encode(), bytes);
        }
    }
}
