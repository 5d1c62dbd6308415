//! BST1 binary arrays and the JSON tensor form.
//!
//! BST1 layout, all integers little-endian:
//!
//! ```text
//! offset 0   magic   "BST1"
//!        4   version u8 = 1
//!        5   dtype   u8 = 1 (f32 LE)
//!        6   rank    u8
//!        7   pad     u8 = 0
//!        8   dims    rank × u32
//!        ..  payload product(dims) × f32, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dims, Tensor};
use crate::error::{Error, Result};

pub const BST_MAGIC: &[u8; 4] = b"BST1";
pub const BST_VERSION: u8 = 1;
pub const DTYPE_F32_LE: u8 = 1;

const HEADER_LEN: usize = 8;

/// An array of any rank as stored in a BST1 file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawArray {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} exceeds 255", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format("dimension exceeds u32 range".into()));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(RawArray { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(BST_MAGIC);
        out.extend_from_slice(&[BST_VERSION, DTYPE_F32_LE, self.dims.len() as u8, 0]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "{} bytes is shorter than the 8-byte header",
                bytes.len()
            )));
        }
        if &bytes[0..4] != BST_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
        }
        if bytes[4] != BST_VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != DTYPE_F32_LE {
            return Err(Error::Format(format!(
                "unsupported dtype code {}",
                bytes[5]
            )));
        }
        let rank = bytes[6] as usize;
        if bytes[7] != 0 {
            return Err(Error::Format(format!("nonzero pad byte {}", bytes[7])));
        }
        let dims_end = HEADER_LEN + 4 * rank;
        if bytes.len() < dims_end {
            return Err(Error::Format(format!("truncated dims for rank {rank}")));
        }
        let dims: Vec<usize> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dims product overflows".into()))?;
        let payload = &bytes[dims_end..];
        if Some(payload.len()) != count.checked_mul(4) {
            return Err(Error::Format(format!(
                "payload is {} bytes, dims {dims:?} need {}",
                payload.len(),
                count.saturating_mul(4)
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(RawArray { dims, data })
    }

    pub fn into_tensor(self) -> Result<Tensor<f32>> {
        if self.dims.len() != 4 {
            return Err(Error::Format(format!(
                "feature maps must be rank 4, got rank {}",
                self.dims.len()
            )));
        }
        Tensor::new(
            [self.dims[0], self.dims[1], self.dims[2], self.dims[3]],
            self.data,
        )
    }
}

impl From<&Tensor<f32>> for RawArray {
    fn from(t: &Tensor<f32>) -> Self {
        RawArray {
            dims: t.dims().as_array().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_array(path: impl AsRef<Path>) -> Result<RawArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RawArray::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_array(path: impl AsRef<Path>, array: &RawArray) -> Result<()> {
    write_atomic(path.as_ref(), &array.to_bytes())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_array(path)?.into_tensor()
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    write_array(path, &RawArray::from(t))
}

#[derive(Serialize, Deserialize)]
struct JsonTensor {
    dims: Dims,
    data: Vec<f32>,
}

/// `{"dims":[n,c,h,w],"data":[...]}`
pub fn tensor_to_json(t: &Tensor<f32>) -> String {
    serde_json::to_string(&JsonTensor {
        dims: t.dims(),
        data: t.data().to_vec(),
    })
    .expect("tensor serialization is infallible")
}

pub fn tensor_from_json(s: &str) -> Result<Tensor<f32>> {
    let jt: JsonTensor = serde_json::from_str(s).map_err(|e| Error::json("tensor json", e))?;
    Tensor::new(jt.dims, jt.data)
}

pub fn read_tensor_json(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let jt: JsonTensor =
        serde_json::from_str(&s).map_err(|e| Error::json(path.display().to_string(), e))?;
    Tensor::new(jt.dims, jt.data)
}

pub fn write_tensor_json(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    write_atomic(path.as_ref(), tensor_to_json(t).as_bytes())
}

fn is_json(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Reads a `.json` tensor or, for any other extension, a BST1 file.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    if is_json(path) {
        read_tensor_json(path)
    } else {
        read_tensor(path)
    }
}

/// Writes `.json` paths in the JSON form and everything else as BST1.
pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    if is_json(path) {
        write_tensor_json(path, t)
    } else {
        write_tensor(path, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let a = RawArray::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = a.to_bytes();
        assert_eq!(&b[..8], &[b'B', b'S', b'T', b'1', 1, 1, 2, 0]);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_malformed() {
        let good = RawArray::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        assert!(RawArray::from_bytes(&good[..5]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(RawArray::from_bytes(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(RawArray::from_bytes(&bad).is_err());
        let mut bad = good.clone();
        bad[5] = 2;
        assert!(RawArray::from_bytes(&bad).is_err());
        let mut bad = good.clone();
        bad[7] = 1;
        assert!(RawArray::from_bytes(&bad).is_err());
        assert!(RawArray::from_bytes(&good[..good.len() - 1]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(RawArray::from_bytes(&long).is_err());
        let rank2 = RawArray::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(rank2.into_tensor().is_err());
    }

    #[test]
    fn json_form() {
        let t = Tensor::new([1, 1, 1, 2], vec![0.5f32, -1.0]).unwrap();
        let s = tensor_to_json(&t);
        assert_eq!(s, r#"{"dims":[1,1,1,2],"data":[0.5,-1.0]}"#);
        assert_eq!(tensor_from_json(&s).unwrap(), t);
        assert!(tensor_from_json(r#"{"dims":[1,1,1,3],"data":[0.5]}"#).is_err());
    }

    proptest! {
        #[test]
        fn bytes_roundtrip(dims in prop::collection::vec(1usize..5, 0..5), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            let a = RawArray::new(dims, data).unwrap();
            let bytes = a.to_bytes();
            let back = RawArray::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back.dims, a.dims);
        }
    }
}
