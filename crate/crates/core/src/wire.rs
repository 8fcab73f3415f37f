//! Wire encoding of restore information for client-to-server transport,
//! plus the concatenated restore-set file format.
//!
//! Record layout (little-endian): magic `RSTR` | version u16 | config hash
//! u64 | num_patches u32 | visible_count u32 | embed_dim u32 | label u32 |
//! visible tokens as f32 | restore ids as varints.

use ndarray::Array2;

use crate::bytes::{put_f32, put_u16, put_u32, put_u64, put_varint, Reader};
use crate::error::{Error, Result};
use crate::masking::RestoreInfo;

const MAGIC: &[u8; 4] = b"RSTR";
const VERSION: u16 = 1;

/// Serialize one restore record.
pub fn encode_wire(restore: &RestoreInfo<f32>) -> Result<Vec<u8>> {
    if restore.visible_count() == 0 {
        return Err(Error::Usage("restore info with empty visible set".into()));
    }
    if restore.num_patches() < restore.visible_count() {
        return Err(Error::Usage(
            "restore info has more visible tokens than patches".into(),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_u64(&mut out, restore.config_hash);
    put_u32(&mut out, restore.num_patches() as u32);
    put_u32(&mut out, restore.visible_count() as u32);
    put_u32(&mut out, restore.visible_tokens.ncols() as u32);
    put_u32(&mut out, restore.label);
    for v in restore.visible_tokens.iter() {
        put_f32(&mut out, *v);
    }
    for &id in &restore.restore_ids {
        put_varint(&mut out, id as u64);
    }
    Ok(out)
}

fn decode_record(r: &mut Reader) -> Result<RestoreInfo<f32>> {
    r.magic(MAGIC)?;
    let version_offset = r.offset;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Decode {
            offset: version_offset,
            reason: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let config_hash = r.u64()?;
    let counts_offset = r.offset;
    let num_patches = r.u32()? as usize;
    let visible_count = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let label = r.u32()?;
    if visible_count == 0 || visible_count > num_patches || embed_dim == 0 {
        return Err(Error::Decode {
            offset: counts_offset,
            reason: format!(
                "inconsistent counts: {visible_count} visible of {num_patches} patches, width {embed_dim}"
            ),
        });
    }
    let mut tokens = Vec::with_capacity(visible_count * embed_dim);
    for _ in 0..visible_count * embed_dim {
        tokens.push(r.f32()?);
    }
    let ids_offset = r.offset;
    let mut restore_ids = Vec::with_capacity(num_patches);
    let mut seen = vec![false; num_patches];
    for _ in 0..num_patches {
        let id = r.varint()? as usize;
        if id >= num_patches || seen[id] {
            return Err(Error::Decode {
                offset: ids_offset,
                reason: "restore ids are not a bijection".into(),
            });
        }
        seen[id] = true;
        restore_ids.push(id);
    }
    Ok(RestoreInfo {
        visible_tokens: Array2::from_shape_vec((visible_count, embed_dim), tokens)
            .expect("sized above"),
        restore_ids,
        label,
        config_hash,
    })
}

/// Inverse of [`encode_wire`]; rejects truncated or corrupted bytes with the
/// failing byte offset.
pub fn decode_wire(bytes: &[u8]) -> Result<RestoreInfo<f32>> {
    let mut r = Reader::new(bytes);
    let restore = decode_record(&mut r)?;
    r.expect_end()?;
    Ok(restore)
}

/// Restore-set file: record count prefix, then concatenated wire records.
pub fn encode_restore_set(records: &[RestoreInfo<f32>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_u32(&mut out, records.len() as u32);
    for record in records {
        out.extend_from_slice(&encode_wire(record)?);
    }
    Ok(out)
}

pub fn decode_restore_set(bytes: &[u8]) -> Result<Vec<RestoreInfo<f32>>> {
    let mut r = Reader::new(bytes);
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        records.push(decode_record(&mut r)?);
    }
    r.expect_end()?;
    Ok(records)
}
