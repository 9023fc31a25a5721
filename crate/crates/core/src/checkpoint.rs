//! Checkpoint container: one file holding a JSON metadata document plus
//! named flat arrays of little-endian f32 values.
//!
//! Layout: magic `HOLN`, format version (u32 LE), metadata length (u64 LE)
//! and bytes, array count (u32 LE), then per array: name (u16 LE length +
//! UTF-8), rank (u8), dims (u32 LE each), values (f32 LE). Writes go through
//! a temp file and an atomic rename.

use crate::error::{Error, Result};
use crate::nn::{Param, ParamCollection};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"HOLN";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub arrays: Vec<ArchiveArray>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Archive {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(ArchiveArray {
            name: name.into(),
            shape,
            data,
        });
    }

    /// Store every parameter of a collection under `prefix/`.
    pub fn push_collection(&mut self, prefix: &str, params: &ParamCollection) {
        for p in params.iter() {
            self.push(format!("{prefix}/{}", p.name), p.shape.clone(), p.data.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&ArchiveArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::invalid(format!("archive has no array named {name}")))
    }

    /// Rebuild a collection from every array under `prefix/`, preserving the
    /// stored order (insertion order at save time).
    pub fn take_collection(&self, prefix: &str) -> Result<ParamCollection> {
        let full = format!("{prefix}/");
        let mut out = ParamCollection::new();
        for a in self.arrays.iter().filter(|a| a.name.starts_with(&full)) {
            out.add(Param {
                name: a.name[full.len()..].to_string(),
                shape: a.shape.clone(),
                data: a.data.clone(),
            });
        }
        if out.is_empty() {
            return Err(Error::invalid(format!(
                "archive has no arrays under prefix {prefix}/"
            )));
        }
        Ok(out)
    }

    pub fn save_atomic(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let file = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(file);
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            let meta = serde_json::to_vec(&self.meta)?;
            w.write_all(&(meta.len() as u64).to_le_bytes())?;
            w.write_all(&meta)?;
            w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
            for a in &self.arrays {
                let name = a.name.as_bytes();
                w.write_all(&(name.len() as u16).to_le_bytes())?;
                w.write_all(name)?;
                w.write_all(&[a.shape.len() as u8])?;
                for &d in &a.shape {
                    w.write_all(&(d as u32).to_le_bytes())?;
                }
                let mut bytes = Vec::with_capacity(a.data.len() * 4);
                for &v in &a.data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&bytes)?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let corrupt = |reason: &str| Error::CorruptFile {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        file.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let mut u64buf = [0u8; 8];
        file.read_exact(&mut u64buf)?;
        let meta_len = u64::from_le_bytes(u64buf) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        file.read_exact(&mut meta_bytes)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)?;
        file.read_exact(&mut u32buf)?;
        let n_arrays = u32::from_le_bytes(u32buf) as usize;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let mut u16buf = [0u8; 2];
            file.read_exact(&mut u16buf)?;
            let name_len = u16::from_le_bytes(u16buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            file.read_exact(&mut name_bytes)?;
            let name =
                String::from_utf8(name_bytes).map_err(|_| corrupt("non-utf8 array name"))?;
            let mut rank = [0u8; 1];
            file.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                file.read_exact(&mut u32buf)?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            let count: usize = shape.iter().product();
            let mut bytes = vec![0u8; count * 4];
            file.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(ArchiveArray { name, shape, data });
        }
        Ok(Archive { meta, arrays })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_preserves_everything() {
        let mut arch = Archive::new(json!({"schema": 1, "step": 42}));
        arch.push("a", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 1e30]);
        arch.push("b/c", vec![1], vec![0.125]);
        let dir = std::env::temp_dir().join("holon_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");
        arch.save_atomic(&path).unwrap();
        let back = Archive::load(&path).unwrap();
        assert_eq!(back.meta["step"], 42);
        assert_eq!(back.arrays.len(), 2);
        assert_eq!(back.arrays[0], arch.arrays[0]);
        assert_eq!(back.arrays[1], arch.arrays[1]);
    }

    #[test]
    fn collection_round_trip() {
        let mut pc = ParamCollection::new();
        pc.add(Param {
            name: "enc.w".into(),
            shape: vec![2, 2],
            data: vec![1.0, 2.0, 3.0, 4.0],
        });
        pc.add(Param {
            name: "enc.b".into(),
            shape: vec![2],
            data: vec![-1.0, 1.0],
        });
        let mut arch = Archive::new(json!({}));
        arch.push_collection("student", &pc);
        let dir = std::env::temp_dir().join("holon_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("coll.ckpt");
        arch.save_atomic(&path).unwrap();
        let back = Archive::load(&path).unwrap();
        let pc2 = back.take_collection("student").unwrap();
        assert_eq!(pc, pc2);
        assert!(back.take_collection("teacher").is_err());
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join("holon_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("garbage.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Archive::load(&path).is_err());
    }

    #[test]
    fn no_tmp_file_left_behind() {
        let dir = std::env::temp_dir().join("holon_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("atomic.ckpt");
        Archive::new(json!({})).save_atomic(&path).unwrap();
        assert!(path.exists());
        assert!(!path.with_extension("tmp").exists());
    }
}
