//! Portable array container: the on-disk interchange format for image grids
//! and parameter tensors.
//!
//! Layout: 4-byte magic `PAC1`, `u32` little-endian row count, `u32`
//! little-endian column count, then `rows * cols` little-endian `f32`
//! values in row-major order. An optional sidecar `<path>.meta` text file
//! holds `key=value` lines in sorted key order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::Grid;

/// File magic for the grid container.
pub const MAGIC: [u8; 4] = *b"PAC1";

/// Canonical file extension for container files.
pub const EXTENSION: &str = "pac";

const MAX_ELEMENTS: u64 = 1 << 30;

/// Write a grid to `path` in container format.
pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    let (rows, cols) = grid.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Data(format!(
            "refusing to write empty grid to {}",
            path.display()
        )));
    }
    let mut buf = Vec::with_capacity(12 + 4 * rows * cols);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in grid.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a grid from a container file.
pub fn read_grid(path: &Path) -> Result<Grid> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header).map_err(|_| {
        Error::Format(format!("{}: truncated container header", path.display()))
    })?;
    if header[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            &header[0..4]
        )));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as u64;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as u64;
    if rows == 0 || cols == 0 || rows * cols > MAX_ELEMENTS {
        return Err(Error::Format(format!(
            "{}: implausible dimensions {}x{}",
            path.display(),
            rows,
            cols
        )));
    }
    let n = (rows * cols) as usize;
    let mut data = vec![0u8; 4 * n];
    file.read_exact(&mut data).map_err(|_| {
        Error::Format(format!(
            "{}: truncated payload, expected {} values",
            path.display(),
            n
        ))
    })?;
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Grid::from_shape_vec((rows as usize, cols as usize), values)
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
}

/// Path of the sidecar metadata record for a container file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

/// Write the sidecar metadata record (`key=value` lines, sorted keys).
pub fn write_meta(path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Data(format!("metadata key/value not encodable: {k}")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    fs::write(meta_path(path), out)?;
    Ok(())
}

/// Read a sidecar metadata record.
pub fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(meta_path(path))?;
    let mut meta = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!(
                "{}: line {} is not key=value",
                meta_path(path).display(),
                i + 1
            ))
        })?;
        meta.insert(k.to_string(), v.to_string());
    }
    Ok(meta)
}
