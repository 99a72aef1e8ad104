//! Single-file archive of named `f64` arrays with embedded JSON metadata.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header (format
//! version, kind, metadata, array index), then the concatenated array data as
//! little-endian doubles. Writes go through a temp file and an atomic rename;
//! readers validate the magic, the version and every array bound, so a
//! truncated file never yields partial state.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CGNCARC\0";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    metadata: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: u64,
    len: u64,
}

/// A fully loaded archive.
#[derive(Debug)]
pub struct Archive {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub arrays: BTreeMap<String, ArrayD<f64>>,
}

/// Atomically replace `path` with `bytes` (temp file + rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write an archive atomically (temp file + rename).
pub fn save_archive(
    path: &Path,
    kind: &str,
    metadata: &serde_json::Value,
    arrays: &[(String, ArrayViewD<'_, f64>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, view) in arrays {
        let len = view.len() as u64;
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: view.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        metadata: metadata.clone(),
        arrays: entries,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Load(format!("cannot serialize header: {e}")))?;

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let tmp = path.with_extension("tmp-write");
    {
        let file = std::fs::File::create(&tmp)
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e| Error::io(tmp.display().to_string(), e);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&header_bytes).map_err(io_err)?;
        for (_, view) in arrays {
            for &v in view.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Load(format!("{}: missing magic (truncated?)", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Load(format!(
            "{}: not a checkpoint archive",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Load(format!("{}: truncated header length", path.display())))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 64 << 20 {
        return Err(Error::Load(format!(
            "{}: implausible header length {header_len}",
            path.display()
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::Load(format!("{}: truncated header", path.display())))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Load(format!("{}: corrupt header: {e}", path.display())))?;
    if header.format_version > FORMAT_VERSION {
        return Err(Error::Load(format!(
            "{}: format version {} is newer than supported version {FORMAT_VERSION}",
            path.display(),
            header.format_version
        )));
    }
    let total: u64 = header.arrays.iter().map(|a| a.len).sum();
    let mut data = vec![0u8; (total as usize) * 8];
    file.read_exact(&mut data)
        .map_err(|_| Error::Load(format!("{}: truncated array data", path.display())))?;

    let mut arrays = BTreeMap::new();
    for entry in &header.arrays {
        let expect: usize = entry.shape.iter().product();
        if expect as u64 != entry.len {
            return Err(Error::Load(format!(
                "{}: array {} shape/len mismatch",
                path.display(),
                entry.name
            )));
        }
        let start = (entry.offset as usize) * 8;
        let end = start + (entry.len as usize) * 8;
        if end > data.len() {
            return Err(Error::Load(format!(
                "{}: array {} out of bounds",
                path.display(),
                entry.name
            )));
        }
        let values: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(entry.shape.clone(), values)
            .map_err(|e| Error::Load(format!("{}: array {}: {e}", path.display(), entry.name)))?;
        arrays.insert(entry.name.clone(), arr);
    }
    Ok(Archive {
        kind: header.kind,
        metadata: header.metadata,
        arrays,
    })
}

/// Copy loaded arrays into preallocated destination views, requiring an exact
/// one-to-one match between the two sets of names.
pub fn restore_tensors(
    archive: &Archive,
    mut targets: Vec<(String, ArrayViewMutD<'_, f64>)>,
    context: &str,
) -> Result<()> {
    if archive.arrays.len() != targets.len() {
        return Err(Error::Load(format!(
            "{context}: archive holds {} arrays, model expects {}",
            archive.arrays.len(),
            targets.len()
        )));
    }
    for (name, view) in targets.iter_mut() {
        let src = archive
            .arrays
            .get(name)
            .ok_or_else(|| Error::Load(format!("{context}: missing array {name}")))?;
        if src.shape() != view.shape() {
            return Err(Error::Load(format!(
                "{context}: array {name} has shape {:?}, expected {:?}",
                src.shape(),
                view.shape()
            )));
        }
        view.assign(src);
    }
    Ok(())
}
