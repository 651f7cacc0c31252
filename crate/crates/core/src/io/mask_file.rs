use std::path::Path;

use super::{magic_of, read_file, write_file, FormatError, Reader};
use crate::error::Result;
use crate::mask_sampler::FreezeMode;
use crate::nm_patterns::{enumerate_patterns, BitMask, NmConfig};

const MAGIC: [u8; 4] = *b"NMSK";
const VERSION: u16 = 1;

/// One layer's frozen mask and how it was drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub name: String,
    pub mask: BitMask,
    pub freeze: FreezeMode,
}

/// Frozen masks for a whole model, stored as per-block pattern indices.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub config: NmConfig,
    pub layers: Vec<MaskRecord>,
}

impl MaskSet {
    pub fn new(config: NmConfig) -> Self {
        Self {
            config,
            layers: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&MaskRecord> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Serialises a mask set. Every mask must be a valid N:M mask.
pub fn encode_masks(set: &MaskSet) -> Result<Vec<u8>> {
    let patterns = enumerate_patterns(set.config);
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.push(set.config.block_len() as u8);
    out.push(set.config.kept() as u8);
    out.extend((set.layers.len() as u32).to_le_bytes());
    for rec in &set.layers {
        let choices = rec.mask.choices(&patterns)?;
        let name = rec.name.as_bytes();
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name);
        out.extend((rec.mask.rows() as u32).to_le_bytes());
        out.extend((rec.mask.cols() as u32).to_le_bytes());
        out.extend((choices.len() as u64).to_le_bytes());
        out.extend(choices.iter().map(|&c| c as u8));
        out.push(rec.freeze.flag());
        out.extend(rec.freeze.seed().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_masks(bytes: &[u8]) -> Result<MaskSet> {
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
    let m = r.u8()? as usize;
    let k = r.u8()? as usize;
    let config = NmConfig::new(m, k)
        .map_err(|_| FormatError::Malformed(format!("invalid block config {k}:{m}")))?;
    let patterns = enumerate_patterns(config);
    let n = patterns.pattern_count();
    let count = r.u32_le()? as usize;
    let mut set = MaskSet::new(config);
    for layer in 0..count {
        let len = r.u16_le()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| FormatError::Malformed(format!("layer {layer} name is not UTF-8")))?;
        let rows = r.u32_le()? as usize;
        let cols = r.u32_le()? as usize;
        let blocks = r.u64_le()? as usize;
        if !cols.is_multiple_of(m) || rows.checked_mul(cols / m) != Some(blocks) {
            return Err(FormatError::CountMismatch(format!(
                "layer {layer}: {blocks} blocks for a {rows}x{cols} mask"
            ))
            .into());
        }
        let raw = r.take(blocks)?;
        let mut choices = Vec::with_capacity(blocks);
        for (block, &index) in raw.iter().enumerate() {
            if index as usize >= n {
                return Err(FormatError::CorruptIndex {
                    layer,
                    block,
                    index,
                    limit: n,
                }
                .into());
            }
            choices.push(index as usize);
        }
        let flag = r.u8()?;
        let seed = r.u64_le()?;
        let freeze = match flag {
            0 => FreezeMode::Deterministic,
            1 => FreezeMode::Stochastic { seed },
            f => {
                return Err(
                    FormatError::Malformed(format!("layer {layer}: freeze flag {f}")).into(),
                )
            }
        };
        let mask = BitMask::from_choices(rows, cols, &choices, &patterns)?;
        set.layers.push(MaskRecord { name, mask, freeze });
    }
    r.finish()?;
    Ok(set)
}

pub fn save_masks(path: &Path, set: &MaskSet) -> Result<()> {
    write_file(path, &encode_masks(set)?)?;
    Ok(())
}

pub fn load_masks(path: &Path) -> Result<MaskSet> {
    decode_masks(&read_file(path)?)
}
