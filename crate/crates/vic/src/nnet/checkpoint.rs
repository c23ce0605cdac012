//! Parameter checkpoint format: a flat archive of named `f64` tensors.
//!
//! Layout: 8-byte magic, little-endian u64 manifest length, JSON manifest
//! (config hash plus per-entry name and shape), then each tensor's entries
//! as little-endian 64-bit floats in manifest order. Round trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor2D;
use super::{collect_entries, load_entries, Parameterized};
use crate::error::{Result, VicError};

const MAGIC: &[u8; 8] = b"VICKPT01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    entries: Vec<ArchiveEntry>,
}

/// Writes named tensors to `path`.
pub fn save_archive(path: &Path, config_hash: &str, entries: &[(String, Tensor2D)]) -> Result<()> {
    let manifest = Manifest {
        config_hash: config_hash.to_string(),
        entries: entries
            .iter()
            .map(|(name, t)| ArchiveEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| VicError::Data(format!("manifest: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, t) in entries {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads an archive back as `(config_hash, entries)`.
pub fn load_archive(path: &Path) -> Result<(String, Vec<(String, Tensor2D)>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        VicError::Dependency(format!("checkpoint {} not readable: {e}", path.display()))
    })?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(VicError::Data(format!(
            "{} is not a parameter archive",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| VicError::Data(format!("manifest: {e}")))?;

    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n = e.rows * e.cols;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push((e.name.clone(), Tensor2D::from_vec(e.rows, e.cols, data)?));
    }
    Ok((manifest.config_hash, entries))
}

/// Saves every parameter of a model.
pub fn save_model(path: &Path, config_hash: &str, model: &mut dyn Parameterized) -> Result<()> {
    let entries = collect_entries(model);
    save_archive(path, config_hash, &entries)
}

/// Loads an archive into a model built with matching shapes, returning the
/// stored config hash.
pub fn load_model(path: &Path, model: &mut dyn Parameterized) -> Result<String> {
    let (hash, entries) = load_archive(path)?;
    load_entries(model, &entries)?;
    Ok(hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{checksum, stream, LinearLayer};

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let mut layer = LinearLayer::init(4, 3, &mut stream(5, &[0]));
        layer.bias[1] = -0.062_499_999_999_999_99; // awkward binary value on purpose
        let sum = checksum(&mut layer);

        save_model(&path, "cfg-hash", &mut layer).unwrap();
        let mut loaded = LinearLayer::new(4, 3);
        let hash = load_model(&path, &mut loaded).unwrap();
        assert_eq!(hash, "cfg-hash");
        assert_eq!(checksum(&mut loaded), sum);

        // Saving again produces identical bytes.
        let path2 = dir.path().join("params2.ckpt");
        save_model(&path2, "cfg-hash", &mut loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn missing_file_is_a_dependency_error() {
        let r = load_archive(Path::new("/nonexistent/x.ckpt"));
        assert!(matches!(r, Err(VicError::Dependency(_))));
    }

    #[test]
    fn garbage_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"notackpt________").unwrap();
        assert!(matches!(load_archive(&path), Err(VicError::Data(_))));
    }
}
