//! On-disk formats: IDX datasets (big-endian), mask sets, model checkpoints
//! and compressed 2:4 weights (little-endian).

mod compressed_file;
mod idx;
mod mask_file;
mod model_file;

pub use compressed_file::{decode_compressed, encode_compressed, load_compressed, save_compressed};
pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, write_idx,
    IdxDataset, IMAGENET_MEAN, IMAGENET_STD,
};
pub use mask_file::{decode_masks, encode_masks, load_masks, save_masks, MaskRecord, MaskSet};
pub use model_file::{decode_model, encode_model, load_model, save_model};

use std::path::Path;

/// Ways a file can fail to parse.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("wrong magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },
    #[error(
        "corrupt pattern index {index} in layer {layer} block {block} (pattern count {limit})"
    )]
    CorruptIndex {
        layer: usize,
        block: usize,
        index: u8,
        limit: usize,
    },
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|e| io_error(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Bounds-checked cursor over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16_le(&mut self) -> Result<u16, FormatError> {
        self.array().map(u16::from_le_bytes)
    }

    pub(crate) fn u32_le(&mut self) -> Result<u32, FormatError> {
        self.array().map(u32::from_le_bytes)
    }

    pub(crate) fn u64_le(&mut self) -> Result<u64, FormatError> {
        self.array().map(u64::from_le_bytes)
    }

    pub(crate) fn u32_be(&mut self) -> Result<u32, FormatError> {
        self.array().map(u32::from_be_bytes)
    }

    pub(crate) fn f64s_le(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let raw =
            self.take(n.checked_mul(8).ok_or_else(|| {
                FormatError::Malformed(format!("payload of {n} floats overflows"))
            })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        let rest = self.bytes.len() - self.pos;
        if rest != 0 {
            return Err(FormatError::Malformed(format!(
                "{rest} trailing bytes after offset {}",
                self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn magic_of(bytes: [u8; 4]) -> u32 {
    u32::from_be_bytes(bytes)
}
