//! Named parameter tables and the ECCW binary format.
//!
//! Layout: `b"ECCW"`, `u32` version, `u32` parameter count, then per
//! parameter a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32`
//! dimensions and the values as `f32`. Everything little-endian, no padding.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{EccError, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"ECCW";
pub const VERSION: u32 = 1;

/// Ordered map from parameter name to tensor. Also holds batch-norm running
/// statistics, which are stored but never optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ModelWeights<T> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

/// Whether a named entry is a running statistic rather than a trainable
/// parameter.
pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<T: Real> ModelWeights<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a new entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(EccError::Weight {
                name,
                detail: "duplicate parameter name".into(),
            });
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| EccError::Weight {
            name: name.to_string(),
            detail: "missing".into(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries.get_mut(name).ok_or_else(|| EccError::Weight {
            name: name.to_string(),
            detail: "missing".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| !is_running_stat(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

impl ModelWeights<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| fmt("file shorter than the header"))?;
        if magic != MAGIC {
            return Err(fmt(format!("bad magic bytes {magic:?}, expected \"ECCW\"")));
        }
        let version = r.u32().ok_or_else(|| fmt("missing version"))?;
        if version != VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let count = r.u32().ok_or_else(|| fmt("missing parameter count"))?;
        let mut weights = ModelWeights::new();
        for index in 0..count {
            let missing = || fmt(format!("truncated before parameter #{index}"));
            let len = r.u16().ok_or_else(missing)? as usize;
            let name_bytes = r.take(len).ok_or_else(missing)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| fmt(format!("parameter #{index} name is not UTF-8")))?
                .to_string();
            let truncated = |what: &str| EccError::Weight {
                name: name.clone(),
                detail: format!("file truncated in {what}"),
            };
            let rank = r.u8().ok_or_else(|| truncated("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(|| truncated("dimensions"))? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4).ok_or_else(|| truncated("values"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| EccError::Weight {
                name: name.clone(),
                detail: e.to_string(),
            })?;
            weights.insert(name, t)?;
        }
        if r.pos != bytes.len() {
            return Err(fmt(format!(
                "{} trailing bytes after the last parameter",
                bytes.len() - r.pos
            )));
        }
        Ok(weights)
    }
}

fn fmt(msg: impl Into<String>) -> EccError {
    EccError::WeightFormat(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, weights.to_bytes()).map_err(|e| EccError::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| EccError::io(path, e))?;
    ModelWeights::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelWeights {
        let mut w = ModelWeights::new();
        w.insert("a.weight", Tensor::from_fn([2, 3, 1, 1], |i| i as f32 * 0.5 - 1.0))
            .unwrap();
        w.insert("a.bias", Tensor::new([2], vec![f32::MIN_POSITIVE, -0.0]).unwrap())
            .unwrap();
        w
    }

    #[test]
    fn exact_layout() {
        let mut w = ModelWeights::new();
        w.insert("x", Tensor::new([1], vec![1.0f32]).unwrap()).unwrap();
        let bytes = w.to_bytes();
        let mut want = b"ECCW".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1u16.to_le_bytes());
        want.push(b'x');
        want.push(1);
        want.extend(1u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let w = sample();
        let back = ModelWeights::from_bytes(&w.to_bytes()).unwrap();
        for ((na, a), (nb, b)) in w.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncation_names_the_parameter() {
        let bytes = sample().to_bytes();
        let err = ModelWeights::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("a.bias"), "{err}");
    }

    #[test]
    fn foreign_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[..4].copy_from_slice(b"GGUF");
        let err = ModelWeights::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        assert!(ModelWeights::from_bytes(&bytes).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut w = sample();
        assert!(w.insert("a.bias", Tensor::zeros([2])).is_err());
    }
}
