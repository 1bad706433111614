//! Bit-exact binary weight container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    4 bytes  "HSIW"
//! version  u32      currently 1
//! count    u32      number of tensors
//! per tensor:
//!   name_len u16, name bytes (UTF-8)
//!   dtype    u8   0 = f32, 1 = f64
//!   rank     u8   >= 1
//!   dims     rank × u32
//!   data     product(dims) × 4 or 8 bytes
//! ```
//!
//! Loading consumes the byte stream exactly; any trailing or missing bytes,
//! bad magic, unknown version, duplicate or unregistered names produce
//! distinct diagnostics.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"HSIW";
pub const VERSION: u32 = 1;

/// One serialized tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub dtype: u8,
    pub dims: Vec<u32>,
    /// Raw little-endian payload bytes.
    pub data: Vec<u8>,
}

/// Parsed container contents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightContainer {
    pub entries: Vec<WeightEntry>,
}

impl WeightContainer {
    /// Serialize to bytes. The empty container is exactly the 12-byte header.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype);
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&e.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor {
            bytes,
            pos: 0,
        };
        let magic = cursor.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:02x?}, expected \"HSIW\"",
                magic
            )));
        }
        let version = u32::from_le_bytes(cursor.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}, expected {VERSION}"
            )));
        }
        let count = u32::from_le_bytes(cursor.take(4, "tensor count")?.try_into().unwrap());
        let mut entries = Vec::with_capacity(count as usize);
        let mut seen = HashSet::new();
        for i in 0..count {
            let name_len =
                u16::from_le_bytes(cursor.take(2, "name length")?.try_into().unwrap()) as usize;
            let name_bytes = cursor.take(name_len, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name {name}")));
            }
            let dtype = cursor.take(1, "dtype")?[0];
            let elem_size = match dtype {
                0 => 4usize,
                1 => 8,
                other => {
                    return Err(Error::Format(format!(
                        "{name}: unknown dtype code {other}"
                    )))
                }
            };
            let rank = cursor.take(1, "rank")?[0] as usize;
            if rank == 0 {
                return Err(Error::Format(format!("{name}: rank must be >= 1")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = u32::from_le_bytes(cursor.take(4, "dim")?.try_into().unwrap());
                if d == 0 {
                    return Err(Error::Format(format!("{name}: zero-sized dimension")));
                }
                numel = numel
                    .checked_mul(d as usize)
                    .ok_or_else(|| Error::Format(format!("{name}: dims overflow")))?;
                dims.push(d);
            }
            let payload = numel
                .checked_mul(elem_size)
                .ok_or_else(|| Error::Format(format!("{name}: payload overflows")))?;
            let data = cursor.take(payload, "tensor payload")?.to_vec();
            entries.push(WeightEntry {
                name,
                dtype,
                dims,
                data,
            });
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - cursor.pos
            )));
        }
        Ok(WeightContainer { entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated container: needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Snapshot every parameter and buffer of a store.
pub fn save_weights<T: Scalar>(store: &ParamStore<T>) -> WeightContainer {
    let entries = store
        .entries()
        .iter()
        .map(|e| {
            let mut data = Vec::with_capacity(e.tensor.data().len() * 4);
            match T::DTYPE_CODE {
                0 => {
                    for v in e.tensor.data() {
                        data.extend_from_slice(&(v.to_f64_val() as f32).to_le_bytes());
                    }
                }
                _ => {
                    for v in e.tensor.data() {
                        data.extend_from_slice(&v.to_f64_val().to_le_bytes());
                    }
                }
            }
            WeightEntry {
                name: e.name.clone(),
                dtype: T::DTYPE_CODE,
                dims: e.dims.iter().map(|&d| d as u32).collect(),
                data,
            }
        })
        .collect();
    WeightContainer { entries }
}

/// Load a container into an already-registered store. Every container name
/// must exist in the registry with matching dims and dtype width; every
/// registry entry must be present.
pub fn load_weights<T: Scalar>(store: &mut ParamStore<T>, container: &WeightContainer) -> Result<()> {
    let mut loaded = HashSet::new();
    for e in &container.entries {
        let entry = store
            .entry(&e.name)
            .map_err(|_| Error::Format(format!("container tensor {} not in the model registry", e.name)))?;
        if e.dtype != T::DTYPE_CODE {
            return Err(Error::Format(format!(
                "{}: dtype code {} does not match the runtime precision ({})",
                e.name,
                e.dtype,
                T::DTYPE_CODE
            )));
        }
        let dims: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
        if dims != entry.dims {
            return Err(Error::Format(format!(
                "{}: dims {:?} do not match registered {:?}",
                e.name, dims, entry.dims
            )));
        }
        let elem = if e.dtype == 0 { 4 } else { 8 };
        let numel = e.data.len() / elem;
        let mut values = Vec::with_capacity(numel);
        if e.dtype == 0 {
            for chunk in e.data.chunks_exact(4) {
                values.push(T::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64));
            }
        } else {
            for chunk in e.data.chunks_exact(8) {
                values.push(T::from_f64(f64::from_le_bytes(chunk.try_into().unwrap())));
            }
        }
        let shape = entry.tensor.shape();
        store.set_tensor(&e.name, Tensor::from_vec(shape, values)?)?;
        loaded.insert(e.name.clone());
    }
    for entry in store.entries() {
        if !loaded.contains(&entry.name) {
            return Err(Error::Format(format!(
                "container is missing model parameter {}",
                entry.name
            )));
        }
    }
    Ok(())
}

/// Convenience: write a store snapshot to a file.
pub fn write_weights_file<T: Scalar>(store: &ParamStore<T>, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, save_weights(store).to_bytes())?;
    Ok(())
}

/// Convenience: read a container file into a registered store.
pub fn read_weights_file<T: Scalar>(store: &mut ParamStore<T>, path: &std::path::Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    load_weights(store, &WeightContainer::from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use crate::tensor::Shape;

    #[test]
    fn empty_container_is_exactly_the_header() {
        let bytes = WeightContainer::default().to_bytes();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"HSIW");
        let back = WeightContainer::from_bytes(&bytes).unwrap();
        assert!(back.entries.is_empty());
    }

    #[test]
    fn single_2x2_tensor_has_16_payload_bytes() {
        let entry = WeightEntry {
            name: "m".into(),
            dtype: 0,
            dims: vec![2, 2],
            data: [1.0f32, 2.0, 3.0, 4.0]
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        };
        assert_eq!(entry.data.len(), 16);
        let container = WeightContainer {
            entries: vec![entry],
        };
        let bytes = container.to_bytes();
        // header 12 + name_len 2 + name 1 + dtype 1 + rank 1 + dims 8 + data 16
        assert_eq!(bytes.len(), 12 + 2 + 1 + 1 + 1 + 8 + 16);
        assert_eq!(WeightContainer::from_bytes(&bytes).unwrap(), container);
    }

    #[test]
    fn store_round_trip_is_byte_identical() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = crate::nn::test_rng(81);
        for (i, dims) in [vec![4usize, 2, 3, 3], vec![7], vec![2, 2]].iter().enumerate() {
            let numel: usize = dims.iter().product();
            let shape = Shape::new(1, 1, 1, numel).unwrap();
            store
                .register(
                    format!("t{i}"),
                    dims.clone(),
                    crate::nn::random_tensor(&mut rng, shape, 1.0),
                    ParamKind::Learnable,
                )
                .unwrap();
        }
        let bytes1 = save_weights(&store).to_bytes();
        let container = WeightContainer::from_bytes(&bytes1).unwrap();
        load_weights(&mut store, &container).unwrap();
        let bytes2 = save_weights(&store).to_bytes();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn corruption_and_mismatch_diagnostics_are_distinct() {
        let mut store = ParamStore::<f32>::new();
        store
            .register(
                "w",
                vec![2],
                Tensor::from_vec(Shape::new(1, 2, 1, 1).unwrap(), vec![1.0, 2.0]).unwrap(),
                ParamKind::Learnable,
            )
            .unwrap();
        let good = save_weights(&store).to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xff;
        let err = WeightContainer::from_bytes(&bad_magic).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bad_version = good.clone();
        bad_version[4] ^= 0x01;
        let err = WeightContainer::from_bytes(&bad_version).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        let truncated = &good[..good.len() - 3];
        let err = WeightContainer::from_bytes(truncated).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut renamed = good.clone();
        // name "w" sits right after header+2; flip it to "x".
        renamed[14] = b'x';
        let container = WeightContainer::from_bytes(&renamed).unwrap();
        let err = load_weights(&mut store, &container).unwrap_err();
        assert!(err.to_string().contains("not in the model registry"), "{err}");
    }
}
