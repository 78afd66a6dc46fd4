//! Framed binary files and atomic writes.
//!
//! Frame layout (all little-endian):
//!
//! ```text
//! magic [4] | version u16 | header_len u32 | header JSON [header_len] | payload
//! ```

use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Writes `bytes` to `path` via a temp file in the same directory, fsync and rename,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn frame(magic: [u8; 4], version: u16, header: &[u8], payload: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + header.len() + 4 * payload.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits a frame into its JSON header and f32 payload.
pub fn unframe(bytes: &[u8], magic: [u8; 4], version: u16) -> Result<(&[u8], Vec<f32>)> {
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < 10 {
        return Err(Error::Corrupt("truncated frame header".into()));
    }
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != version {
        return Err(Error::Version {
            found,
            supported: version,
        });
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let header_end = 10usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Corrupt("header extends past end of file".into()))?;
    let payload = &bytes[header_end..];
    if payload.len() % 4 != 0 {
        return Err(Error::Corrupt(format!("payload of {} bytes is not f32-aligned", payload.len())));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((&bytes[10..header_end], values))
}
