//! Versioned binary parameter snapshots.
//!
//! Layout, all integers little-endian: magic `"PPMN"`, format version
//! (u32), tensor count (u32); then per tensor: name byte length (u32),
//! UTF-8 name, rank (u32, always 4), one u32 extent per axis, and the
//! values as 32-bit IEEE-754.

use std::fs;
use std::path::Path;

use ppmn_core::graph::ParamStore;
use ppmn_core::tensor::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"PPMN";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, param) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for extent in param.value.shape() {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for value in param.value.data() {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(CliError::Checkpoint {
                path: self.path.to_path_buf(),
                reason: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let bytes = self.take(4, what)?;
        Ok(u32::from_le_bytes(bytes.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let err = |reason: String| CliError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = Reader { bytes, pos: 0, path };
    if reader.take(4, "magic")? != MAGIC {
        return Err(err("bad magic, not a checkpoint".into()));
    }
    let version = reader.u32("version")?;
    if version != VERSION {
        return Err(err(format!("unsupported format version {version}")));
    }
    let count = reader.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = reader.u32("name length")? as usize;
        let name = std::str::from_utf8(reader.take(name_len, "name")?)
            .map_err(|_| err("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = reader.u32("rank")?;
        if rank != 4 {
            return Err(err(format!("tensor {name} has rank {rank}, expected 4")));
        }
        let mut shape = [0usize; 4];
        for extent in shape.iter_mut() {
            *extent = reader.u32("extent")? as usize;
        }
        let len: usize = shape.iter().product();
        let raw = reader.take(4 * len, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((
            name,
            Tensor::new(shape, data).map_err(|e| err(e.to_string()))?,
        ));
    }
    if reader.pos != bytes.len() {
        return Err(err(format!("{} trailing bytes", bytes.len() - reader.pos)));
    }
    Ok(tensors)
}

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(CliError::io(path))
}

/// Loads a snapshot into an existing store. Every stored parameter must
/// exist in the model with the same shape, and every model parameter must
/// be covered.
pub fn load_into(params: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    let tensors = decode(&bytes, path)?;
    let err = |reason: String| CliError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if tensors.len() != params.len() {
        return Err(err(format!(
            "snapshot has {} tensors, model expects {}",
            tensors.len(),
            params.len()
        )));
    }
    for (name, tensor) in tensors {
        params
            .set_value(&name, tensor)
            .map_err(|e| err(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ppmn_core::model::{ModelConfig, PpmnModel};
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("test.ckpt")
    }

    #[test]
    fn header_layout_is_stable() {
        let mut params = ParamStore::new();
        params
            .insert("w", Tensor::new([1, 1, 1, 2], vec![1.0, -2.5]).unwrap())
            .unwrap();
        let bytes = encode(&params);
        assert_eq!(&bytes[..4], b"PPMN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1); // name len
        assert_eq!(&bytes[16..17], b"w");
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 4); // rank
        let extents: Vec<u32> = (0..4)
            .map(|i| u32::from_le_bytes(bytes[21 + 4 * i..25 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(extents, vec![1, 1, 1, 2]);
        assert_eq!(f32::from_le_bytes(bytes[37..41].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[41..45].try_into().unwrap()), -2.5);
        assert_eq!(bytes.len(), 45);
    }

    #[test]
    fn model_snapshot_round_trips_bitwise() {
        let model = PpmnModel::build(ModelConfig::desk()).unwrap();
        let bytes = encode(model.params());
        let tensors = decode(&bytes, &p()).unwrap();
        assert_eq!(tensors.len(), model.params().len());
        for ((name, tensor), (expect_name, expect)) in
            tensors.iter().zip(model.params().iter())
        {
            assert_eq!(name, expect_name);
            assert_eq!(tensor, &expect.value);
        }
        let mut restored = PpmnModel::build(ModelConfig::desk()).unwrap();
        for (_, p) in restored.params_mut().iter_mut() {
            p.value.fill(0.0);
        }
        let dir = tempfile::TempDir::new().unwrap();
        let file = dir.path().join("m.ckpt");
        std::fs::write(&file, &bytes).unwrap();
        load_into(restored.params_mut(), &file).unwrap();
        for ((_, a), (_, b)) in restored.params().iter().zip(model.params().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::zeros([1, 1, 1, 1])).unwrap();
        let mut bytes = encode(&params);
        bytes[0] = b'X';
        assert!(decode(&bytes, &p()).is_err());
        let mut bytes = encode(&params);
        bytes[4] = 9;
        let err = decode(&bytes, &p()).unwrap_err();
        assert!(format!("{err}").contains("version"));
    }

    #[test]
    fn rejects_truncation_and_trailing_garbage() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::zeros([1, 1, 2, 2])).unwrap();
        let bytes = encode(&params);
        assert!(decode(&bytes[..bytes.len() - 2], &p()).is_err());
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(decode(&padded, &p()).is_err());
    }

    #[test]
    fn load_rejects_shape_and_name_drift() {
        let model = PpmnModel::build(ModelConfig::desk()).unwrap();
        let dir = tempfile::TempDir::new().unwrap();
        let file = dir.path().join("m.ckpt");
        save(model.params(), &file).unwrap();

        let mut other = ModelConfig::desk();
        other.fc_hidden = 32;
        let mut smaller = PpmnModel::build(other).unwrap();
        assert!(load_into(smaller.params_mut(), &file).is_err());
    }
}
