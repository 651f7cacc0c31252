use std::path::Path;

use super::{magic_of, read_file, write_file, FormatError, Reader};
use crate::error::Result;
use crate::nm_patterns::{pack_2bit, unpack_2bit, Compressed24};

const MAGIC: [u8; 4] = *b"NM24";
const VERSION: u16 = 1;

/// `NM24`, version, rows, cols, retained values (f64), then the 2-bit
/// in-block indices packed four to a byte.
pub fn encode_compressed(c: &Compressed24) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + c.value_bytes() + c.index_bytes());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((c.rows() as u32).to_le_bytes());
    out.extend((c.cols() as u32).to_le_bytes());
    for v in c.values() {
        out.extend(v.to_le_bytes());
    }
    out.extend(pack_2bit(c.indices()));
    out
}

pub fn decode_compressed(bytes: &[u8]) -> Result<Compressed24> {
    let mut r = Reader::new(bytes);
    let magic = r.array::<4>()?;
    if magic != MAGIC {
        return Err(FormatError::WrongMagic {
            expected: magic_of(MAGIC),
            found: magic_of(magic),
        }
        .into());
    }
    let version = r.u16_le()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            found: version,
        }
        .into());
    }
    let rows = r.u32_le()? as usize;
    let cols = r.u32_le()? as usize;
    let kept = rows
        .checked_mul(cols / 2)
        .ok_or_else(|| FormatError::Malformed("dimensions overflow".into()))?;
    let values = r.f64s_le(kept)?;
    let packed = r.take(kept.div_ceil(4))?;
    r.finish()?;
    let c = Compressed24::from_parts(rows, cols, values, unpack_2bit(packed, kept))?;
    c.check_indices()?;
    Ok(c)
}

pub fn save_compressed(path: &Path, c: &Compressed24) -> Result<()> {
    write_file(path, &encode_compressed(c))?;
    Ok(())
}

pub fn load_compressed(path: &Path) -> Result<Compressed24> {
    decode_compressed(&read_file(path)?)
}
