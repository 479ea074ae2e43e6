//! Checkpoint container: one file holding a JSON metadata block and a raw
//! little-endian f32 parameter blob.
//!
//! Layout: 8-byte magic, u64 metadata length, metadata bytes, u64 blob
//! length, blob bytes. Loaders must reject unknown magic or version
//! explicitly rather than guessing.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CDPCKPT\x01";

pub fn write_container(path: &Path, meta_json: &[u8], params: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut buf = Vec::with_capacity(24 + meta_json.len() + params.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta_json);
    buf.extend_from_slice(&((params.len() * 4) as u64).to_le_bytes());
    for v in params {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(Vec<u8>, Vec<f32>)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Format {
            what: "checkpoint".into(),
            detail: format!("{}: unrecognized magic bytes", path.display()),
        });
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
    let meta_len = u64::from_le_bytes(len8) as usize;
    let mut meta = vec![0u8; meta_len];
    file.read_exact(&mut meta).map_err(|e| Error::io(path, e))?;
    file.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
    let blob_len = u64::from_le_bytes(len8) as usize;
    if blob_len % 4 != 0 {
        return Err(Error::format("checkpoint", "parameter blob misaligned"));
    }
    let mut blob = vec![0u8; blob_len];
    file.read_exact(&mut blob).map_err(|e| Error::io(path, e))?;
    let params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((meta, params))
}
