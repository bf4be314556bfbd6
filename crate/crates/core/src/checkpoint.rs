//! Named-tensor checkpoints: a binary archive of (name, shape, trainable
//! flag, f32 payload) entries plus a JSON shape manifest for inspection.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamStore};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NTAR";

/// Shape listing written next to the archive.
#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u32).to_le_bytes())?;
        f.write_all(bytes)?;
        f.write_all(&(p.value.rows as u32).to_le_bytes())?;
        f.write_all(&(p.value.cols as u32).to_le_bytes())?;
        f.write_all(&[p.trainable as u8])?;
        for &v in &p.value.data {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("not a tensor archive (bad magic)"));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf);
    let mut store = ParamStore::new();
    for _ in 0..count {
        f.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?;
        f.read_exact(&mut u32buf)?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        f.read_exact(&mut u32buf)?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        let mut flag = [0u8; 1];
        f.read_exact(&mut flag)?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            f.read_exact(&mut u32buf)?;
            data.push(f32::from_le_bytes(u32buf) as f64);
        }
        store.insert(name, Matrix::from_vec(rows, cols, data)?, flag[0] != 0)?;
    }
    Ok(store)
}

pub fn write_manifest(store: &ParamStore, path: &Path) -> Result<()> {
    let manifest = Manifest {
        tensors: store
            .iter()
            .map(|(name, p)| ManifestEntry {
                name: name.clone(),
                rows: p.value.rows,
                cols: p.value.cols,
                trainable: p.trainable,
            })
            .collect(),
    };
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_preserves_values_at_f32_precision_and_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store
            .insert("a.w", Matrix::uniform(3, 4, 1.0, &mut rng), true)
            .unwrap();
        store
            .insert("b.frozen", Matrix::uniform(2, 2, 1.0, &mut rng), false)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ntar");
        save(&store, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(!back.get("b.frozen").unwrap().trainable);
        assert!(back.get("a.w").unwrap().trainable);
        let orig = &store.get("a.w").unwrap().value;
        let got = &back.get("a.w").unwrap().value;
        assert_eq!((got.rows, got.cols), (3, 4));
        for (x, y) in orig.data.iter().zip(&got.data) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }

    #[test]
    fn insertion_order_is_preserved() {
        let mut store = ParamStore::new();
        for name in ["z", "a", "m"] {
            store.insert(name, Matrix::zeros(1, 1), true).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ntar");
        save(&store, &path).unwrap();
        let back = load(&path).unwrap();
        let names: Vec<&String> = back.names().collect();
        assert_eq!(names, vec!["z", "a", "m"]);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"JUNKxxxxxxx").unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn manifest_lists_every_tensor() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::zeros(2, 3), true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        write_manifest(&store, &path).unwrap();
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(manifest.tensors.len(), 1);
        assert_eq!(manifest.tensors[0].name, "w");
        assert_eq!((manifest.tensors[0].rows, manifest.tensors[0].cols), (2, 3));
    }
}
