//! Binary containers for quantized checkpoints and per-task scale packs, the
//! run configuration and artifact export.

mod atomic;
pub mod checkpoint;
pub mod config;
pub mod export;
pub mod scalepack;

pub use atomic::write_atomic;
pub use checkpoint::{
    checkpoint_reads, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use config::RunConfig;
pub use scalepack::{decode_scalepack, encode_scalepack, load_scalepack, save_scalepack, PackMeta};

use crate::error::{Error, Result};

/// Fixed prefix shared by both containers: magic, version, header length.
pub(crate) const PREFIX_LEN: usize = 4 + 2 + 4;

pub(crate) fn write_prefix(out: &mut Vec<u8>, magic: &[u8; 4], version: u16, header: &[u8]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
}

/// Validates the prefix and returns `(header, payload, payload_offset)`.
pub(crate) fn split_container<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u16) -> Result<(&'a [u8], &'a [u8], usize)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::corrupt(0, format!("missing {:?} magic", String::from_utf8_lossy(magic))));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(Error::corrupt(bytes.len() as u64, "truncated container prefix"));
    }
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != version {
        return Err(Error::Migration {
            found,
            expected: version,
        });
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let end = PREFIX_LEN
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::corrupt(bytes.len() as u64, format!("header of {hlen} bytes is truncated")))?;
    Ok((&bytes[PREFIX_LEN..end], &bytes[end..], end))
}

pub(crate) fn f32_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}
