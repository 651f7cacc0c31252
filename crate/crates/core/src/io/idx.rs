use std::path::Path;

use super::{read_file, write_file, FormatError, Reader};
use crate::error::Result;
use crate::model::Sample;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Per-channel RGB statistics commonly used for ImageNet-style inputs.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Greyscale images and labels from a pair of IDX files.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxDataset {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    /// Normalisation `(x / 255 - mean) / std` applied by [`Self::samples`].
    pub mean: f64,
    pub std: f64,
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn with_normalization(mut self, mean: f64, std: f64) -> Self {
        self.mean = mean;
        self.std = std;
        self
    }

    /// Normalised samples in file order.
    pub fn samples(&self) -> Vec<Sample> {
        (0..self.len())
            .map(|i| Sample {
                input: self
                    .image(i)
                    .iter()
                    .map(|&p| (p as f64 / 255.0 - self.mean) / self.std)
                    .collect(),
                label: self.labels[i] as usize,
            })
            .collect()
    }
}

/// `(count, rows, cols, pixels)` of an IDX image file.
pub fn parse_idx_images(
    bytes: &[u8],
) -> std::result::Result<(usize, usize, usize, Vec<u8>), FormatError> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(FormatError::WrongMagic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let n = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| FormatError::Malformed("image dimensions overflow".into()))?;
    let data = r.take(n)?.to_vec();
    r.finish()?;
    Ok((count, rows, cols, data))
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, FormatError> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be()?;
    if magic != LABEL_MAGIC {
        return Err(FormatError::WrongMagic {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let count = r.u32_be()? as usize;
    let data = r.take(count)?.to_vec();
    r.finish()?;
    Ok(data)
}

/// Reads an image/label IDX pair, checking that the counts agree.
pub fn load_idx(images: &Path, labels: &Path) -> Result<IdxDataset> {
    let (count, rows, cols, pixels) = parse_idx_images(&read_file(images)?)?;
    let labels = parse_idx_labels(&read_file(labels)?)?;
    if labels.len() != count {
        return Err(FormatError::CountMismatch(format!(
            "{count} images but {} labels",
            labels.len()
        ))
        .into());
    }
    Ok(IdxDataset {
        rows,
        cols,
        images: pixels,
        labels,
        mean: 0.0,
        std: 1.0,
    })
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend(IMAGE_MAGIC.to_be_bytes());
    for v in [count, rows, cols] {
        out.extend((v as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABEL_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes a dataset as an image/label IDX pair.
pub fn write_idx(data: &IdxDataset, images: &Path, labels: &Path) -> Result<()> {
    write_file(
        images,
        &encode_idx_images(data.rows, data.cols, &data.images),
    )?;
    write_file(labels, &encode_idx_labels(&data.labels))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend([0, 64, 128, 255, 1, 2, 3, 4]);
        b
    }

    #[test]
    fn golden_images() {
        let (n, r, c, px) = parse_idx_images(&fixture()).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert_eq!(px, vec![0, 64, 128, 255, 1, 2, 3, 4]);
    }

    #[test]
    fn label_file_is_not_an_image_file() {
        let labels = encode_idx_labels(&[1, 2]);
        assert_eq!(
            parse_idx_images(&labels),
            Err(FormatError::WrongMagic {
                expected: IMAGE_MAGIC,
                found: LABEL_MAGIC
            })
        );
    }

    #[test]
    fn truncated_payload() {
        let mut b = fixture();
        b.pop();
        assert!(matches!(
            parse_idx_images(&b),
            Err(FormatError::Truncated { .. })
        ));
        let mut l = encode_idx_labels(&[1, 2, 3]);
        l.pop();
        assert!(matches!(
            parse_idx_labels(&l),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn encode_roundtrip() {
        let (_, r, c, px) = parse_idx_images(&fixture()).unwrap();
        assert_eq!(encode_idx_images(r, c, &px), fixture());
    }
}
