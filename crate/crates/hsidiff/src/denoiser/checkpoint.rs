//! Binary checkpoint container.
//!
//! Layout: magic `HSID`, version u16 LE, tensor count u32 LE, then per
//! tensor (name length u32 LE + UTF-8 name, ndim u8, dims u32 LE each,
//! values f64 LE), and a trailing CRC32 (IEEE) over all preceding bytes.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSID";
pub const CHECKPOINT_VERSION: u16 = 1;

fn crc32_table() -> &'static [u32; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, entry) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *entry = c;
        }
        table
    })
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

/// Serialize tensors into the container format.
pub fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        bytes.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(t.name.as_bytes());
        bytes.push(t.shape.len() as u8);
        for &d in &t.shape {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

/// Parse a container back into tensors. The `frozen` flag is not part of
/// the format; callers re-derive it from the architecture.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 14 {
        return Err(bad("container too short"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic (expected HSID)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual_crc = crc32(body);
    if stored_crc != actual_crc {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let mut cursor = 10usize;
    let mut tensors = Vec::with_capacity(count);
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > body.len() {
            return Err(bad("truncated tensor table"));
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| bad("tensor name is not UTF-8"))?;
        let ndim = take(&mut cursor, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut cursor, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor {
            name,
            shape,
            data,
            frozen: false,
        });
    }
    if cursor != body.len() {
        return Err(bad("trailing bytes after tensor table"));
    }
    Ok(tensors)
}

/// Write tensors to `path` atomically.
pub fn save_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    write_atomic(path, &encode_tensors(tensors))
}

/// Read tensors from `path`.
pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}
