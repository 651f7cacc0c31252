use std::path::Path;

use sha2::{Digest, Sha256};

use super::{magic_of, read_file, write_file, FormatError, Reader};
use crate::conv::WeightMatrix;
use crate::error::Result;
use crate::matrix::Matrix;
use crate::model::{Activation, CompositionalClassifier, Layer, LayerKind};
use crate::nm_patterns::NmConfig;

const MAGIC: [u8; 4] = *b"NMCL";
const VERSION: u16 = 1;

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Identity => 1,
    }
}

/// Serialises layer descriptors and unaugmented weights/biases, followed by
/// a SHA-256 of everything before it. Masks and logits are not stored.
pub fn encode_model(model: &CompositionalClassifier) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.push(model.config().block_len() as u8);
    out.push(model.config().kept() as u8);
    out.extend((model.input_dim() as u32).to_le_bytes());
    out.extend((model.depth() as u32).to_le_bytes());
    for l in model.layers() {
        let name = l.name().as_bytes();
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name);
        out.push(activation_code(l.activation()));
        let dims: Vec<usize> = match l.kind() {
            LayerKind::Conv {
                in_channels,
                out_channels,
                height,
                width,
                kernel_h,
                kernel_w,
            } => {
                out.push(0);
                vec![in_channels, out_channels, height, width, kernel_h, kernel_w]
            }
            LayerKind::Linear { inputs, outputs } => {
                out.push(1);
                vec![inputs, outputs]
            }
        };
        for d in dims {
            out.extend((d as u32).to_le_bytes());
        }
        for v in l.weights().unaugmented().as_slice() {
            out.extend(v.to_le_bytes());
        }
        for v in l.bias() {
            out.extend(v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend(digest);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<CompositionalClassifier> {
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
    if bytes.len() < 32 {
        return Err(FormatError::Truncated {
            offset: 0,
            needed: 32,
            available: bytes.len(),
        }
        .into());
    }
    let body = &bytes[..bytes.len() - 32];
    if Sha256::digest(body).as_slice() != &bytes[bytes.len() - 32..] {
        return Err(FormatError::ChecksumMismatch.into());
    }
    let mut r = Reader::new(body);
    r.take(6)?;
    let m = r.u8()? as usize;
    let k = r.u8()? as usize;
    let config = NmConfig::new(m, k)
        .map_err(|_| FormatError::Malformed(format!("invalid block config {k}:{m}")))?;
    let input_dim = r.u32_le()? as usize;
    let depth = r.u32_le()? as usize;
    let mut layers = Vec::with_capacity(depth.min(1024));
    for i in 0..depth {
        let len = r.u16_le()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| FormatError::Malformed(format!("layer {i} name is not UTF-8")))?;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            a => return Err(FormatError::Malformed(format!("layer {i}: activation {a}")).into()),
        };
        let kind = match r.u8()? {
            0 => {
                let mut d = [0usize; 6];
                for v in &mut d {
                    *v = r.u32_le()? as usize;
                }
                LayerKind::Conv {
                    in_channels: d[0],
                    out_channels: d[1],
                    height: d[2],
                    width: d[3],
                    kernel_h: d[4],
                    kernel_w: d[5],
                }
            }
            1 => LayerKind::Linear {
                inputs: r.u32_le()? as usize,
                outputs: r.u32_le()? as usize,
            },
            t => return Err(FormatError::Malformed(format!("layer {i}: kind {t}")).into()),
        };
        let rows = kind.weight_rows();
        let cols = kind.fan_in();
        let weights = r.f64s_le(rows.checked_mul(cols).ok_or_else(|| {
            FormatError::Malformed(format!("layer {i}: weight count overflows"))
        })?)?;
        let bias = r.f64s_le(rows)?;
        let w = WeightMatrix::dense(Matrix::from_vec(rows, cols, weights)?);
        layers.push(Layer::from_parts(name, kind, w, bias, activation)?);
    }
    r.finish()?;
    CompositionalClassifier::with_config(input_dim, layers, config)
}

pub fn save_model(path: &Path, model: &CompositionalClassifier) -> Result<()> {
    write_file(path, &encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CompositionalClassifier> {
    decode_model(&read_file(path)?)
}
