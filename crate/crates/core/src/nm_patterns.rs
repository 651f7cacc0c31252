//! N:M sparsity patterns, bit masks, and the compressed 2:4 storage format.
//!
//! Blocks tile each row of a (column-augmented) weight matrix left to right.
//! A block of `M` entries keeps exactly `K` of them. Choice indices always
//! refer to the lexicographic enumeration of the kept-position subsets, so
//! `[1,1,0,0]` is pattern 0 and `[0,0,1,1]` is pattern 5 for 2:4.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Block length `M` and kept count `K` of an N:M sparsity constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NmConfig {
    block_len: usize,
    kept: usize,
}

impl NmConfig {
    /// Largest supported block length.
    pub const MAX_BLOCK_LEN: usize = 8;

    pub fn new(block_len: usize, kept: usize) -> Result<Self> {
        if kept == 0 || kept >= block_len || block_len > Self::MAX_BLOCK_LEN {
            return Err(Error::InvalidConfig { block_len, kept });
        }
        Ok(Self { block_len, kept })
    }

    /// The 2:4 configuration supported by sparse tensor cores.
    pub const fn two_four() -> Self {
        Self {
            block_len: 4,
            kept: 2,
        }
    }

    #[inline]
    pub fn block_len(&self) -> usize {
        self.block_len
    }

    #[inline]
    pub fn kept(&self) -> usize {
        self.kept
    }

    /// Number of distinct patterns, `C(M, K)`.
    pub fn pattern_count(&self) -> usize {
        binomial(self.block_len, self.kept)
    }

    /// Smallest multiple of `M` that is `>= cols`.
    pub fn aligned_width(&self, cols: usize) -> usize {
        cols.div_ceil(self.block_len) * self.block_len
    }
}

impl Default for NmConfig {
    fn default() -> Self {
        Self::two_four()
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// `C(M, K)` for a validated configuration.
pub fn pattern_count(config: NmConfig) -> usize {
    config.pattern_count()
}

/// The pattern matrix: every admissible keep/zero column for one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternMatrix {
    config: NmConfig,
    // pattern_count x M, 0/1
    bits: Vec<u8>,
    // pattern_count x K, strictly increasing
    positions: Vec<u8>,
}

impl PatternMatrix {
    pub fn config(&self) -> NmConfig {
        self.config
    }

    pub fn block_len(&self) -> usize {
        self.config.block_len
    }

    pub fn pattern_count(&self) -> usize {
        self.bits.len() / self.config.block_len
    }

    /// Column `p` as a 0/1 vector of length `M`.
    pub fn column(&self, p: usize) -> &[u8] {
        let m = self.config.block_len;
        &self.bits[p * m..(p + 1) * m]
    }

    /// Kept positions of pattern `p`, ascending.
    pub fn kept_positions(&self, p: usize) -> &[u8] {
        let k = self.config.kept;
        &self.positions[p * k..(p + 1) * k]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[u8]> {
        self.bits.chunks(self.config.block_len)
    }

    /// Index of the pattern equal to `block`, if any.
    pub fn index_of(&self, block: &[u8]) -> Option<usize> {
        self.columns().position(|c| c == block)
    }

    /// Patterns admissible for a block whose first `real` entries are weights
    /// and whose remaining entries are structural zeros from augmentation.
    ///
    /// With `real >= K` only patterns confined to the real entries qualify.
    /// With `real < K` the block cannot be learned: the single admissible
    /// pattern is the first one covering every real entry.
    pub fn admissible(&self, real: usize) -> Vec<bool> {
        let m = self.config.block_len;
        let k = self.config.kept;
        if real >= m {
            return vec![true; self.pattern_count()];
        }
        if real >= k {
            return (0..self.pattern_count())
                .map(|p| self.kept_positions(p).iter().all(|&i| (i as usize) < real))
                .collect();
        }
        let first = (0..self.pattern_count())
            .find(|&p| self.column(p)[..real].iter().all(|&b| b == 1))
            .expect("some pattern covers fewer than K entries");
        (0..self.pattern_count()).map(|p| p == first).collect()
    }
}

/// All `C(M, K)` K-hot columns in lexicographic order of their kept positions
/// (equivalently, descending as bit strings read from element 0).
pub fn enumerate_patterns(config: NmConfig) -> PatternMatrix {
    let m = config.block_len;
    let k = config.kept;
    let mut bits = Vec::new();
    let mut positions = Vec::new();
    let mut combo: Vec<usize> = (0..k).collect();
    loop {
        let mut col = vec![0u8; m];
        for &i in &combo {
            col[i] = 1;
        }
        bits.extend(col);
        positions.extend(combo.iter().map(|&i| i as u8));
        // advance to the next combination
        let mut i = k;
        loop {
            if i == 0 {
                return PatternMatrix {
                    config,
                    bits,
                    positions,
                };
            }
            i -= 1;
            if combo[i] < m - k + i {
                break;
            }
        }
        combo[i] += 1;
        for j in i + 1..k {
            combo[j] = combo[j - 1] + 1;
        }
    }
}

/// A frozen {0,1} mask over a (column-augmented) weight matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
    config: NmConfig,
}

impl BitMask {
    /// Wraps raw bits. Only dimensions are checked; use [`validate_mask`]
    /// for the N:M constraint.
    pub fn from_bits(rows: usize, cols: usize, bits: Vec<u8>, config: NmConfig) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {rows}x{cols} mask",
                bits.len()
            )));
        }
        if !cols.is_multiple_of(config.block_len) {
            return Err(Error::Misaligned {
                cols,
                block_len: config.block_len,
            });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidParameter("mask bits must be 0 or 1".into()));
        }
        Ok(Self {
            rows,
            cols,
            bits,
            config,
        })
    }

    /// Lays out one pattern choice per block, row-major.
    pub fn from_choices(
        rows: usize,
        cols: usize,
        choices: &[usize],
        patterns: &PatternMatrix,
    ) -> Result<Self> {
        let m = patterns.block_len();
        if !cols.is_multiple_of(m) {
            return Err(Error::Misaligned { cols, block_len: m });
        }
        if choices.len() != rows * cols / m {
            return Err(Error::DimensionMismatch(format!(
                "{} choices for {} blocks",
                choices.len(),
                rows * cols / m
            )));
        }
        let mut bits = Vec::with_capacity(rows * cols);
        for &c in choices {
            if c >= patterns.pattern_count() {
                return Err(Error::InvalidParameter(format!("pattern index {c}")));
            }
            bits.extend_from_slice(patterns.column(c));
        }
        Self::from_bits(rows, cols, bits, patterns.config())
    }

    pub fn ones(rows: usize, cols: usize, config: NmConfig) -> Result<Self> {
        Self::from_bits(rows, cols, vec![1; rows * cols], config)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn config(&self) -> NmConfig {
        self.config
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn block_count(&self) -> usize {
        self.bits.len() / self.config.block_len
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, bit: bool) {
        self.bits[r * self.cols + c] = bit as u8;
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("shape is consistent")
    }

    /// `B ⊙ W`.
    pub fn apply(&self, w: &Matrix) -> Result<Matrix> {
        if w.shape() != self.shape() {
            return Err(Error::DimensionMismatch(format!(
                "mask {:?} vs weights {:?}",
                self.shape(),
                w.shape()
            )));
        }
        let data = w
            .as_slice()
            .iter()
            .zip(&self.bits)
            .map(|(&v, &b)| if b == 1 { v } else { 0.0 })
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    /// Pattern index of every block, or an error if a block is not a pattern.
    pub fn choices(&self, patterns: &PatternMatrix) -> Result<Vec<usize>> {
        validate_mask(self)?;
        Ok(self
            .bits
            .chunks(self.config.block_len)
            .map(|b| patterns.index_of(b).expect("valid block is a pattern"))
            .collect())
    }

    /// Fraction of zero entries.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        let zeros = self.bits.iter().filter(|&&b| b == 0).count();
        zeros as f64 / self.bits.len() as f64
    }
}

/// Checks that every row-major block of `M` entries holds exactly `K` ones.
/// Reports the first violating block.
pub fn validate_mask(mask: &BitMask) -> Result<()> {
    let m = mask.config.block_len;
    let blocks_per_row = mask.cols / m;
    for (i, block) in mask.bits.chunks(m).enumerate() {
        let popcount = block.iter().filter(|&&b| b == 1).count();
        if popcount != mask.config.kept {
            return Err(Error::MaskViolation {
                row: i / blocks_per_row,
                block: i % blocks_per_row,
                popcount,
                expected: mask.config.kept,
            });
        }
    }
    Ok(())
}

/// Summary of a frozen mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStats {
    pub rows: usize,
    pub cols: usize,
    pub blocks: usize,
    /// Blocks per pattern index.
    pub histogram: Vec<usize>,
    /// Fraction of zero entries.
    pub sparsity: f64,
}

/// Pattern histogram and sparsity of a valid mask.
pub fn mask_stats(mask: &BitMask, patterns: &PatternMatrix) -> Result<MaskStats> {
    let choices = mask.choices(patterns)?;
    let mut histogram = vec![0; patterns.pattern_count()];
    for c in choices {
        histogram[c] += 1;
    }
    Ok(MaskStats {
        rows: mask.rows,
        cols: mask.cols,
        blocks: mask.block_count(),
        histogram,
        sparsity: mask.sparsity(),
    })
}

/// Values plus 2-bit in-block indices of a 2:4 sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed24 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    indices: Vec<u8>,
}

impl Compressed24 {
    /// Assembles a compressed matrix from raw parts. Index ordering is
    /// checked lazily by [`Compressed24::check_indices`] and [`decompress`].
    pub fn from_parts(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        indices: Vec<u8>,
    ) -> Result<Self> {
        if !cols.is_multiple_of(4) {
            return Err(Error::Misaligned { cols, block_len: 4 });
        }
        let kept = rows * cols / 2;
        if values.len() != kept || indices.len() != kept {
            return Err(Error::DimensionMismatch(format!(
                "{} values / {} indices for a {rows}x{cols} 2:4 matrix",
                values.len(),
                indices.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            values,
            indices,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    /// Retained values of row `r`, two per block.
    #[inline]
    pub fn row_values(&self, r: usize) -> &[f64] {
        let half = self.cols / 2;
        &self.values[r * half..(r + 1) * half]
    }

    #[inline]
    pub fn row_indices(&self, r: usize) -> &[u8] {
        let half = self.cols / 2;
        &self.indices[r * half..(r + 1) * half]
    }

    /// Verifies each pair of indices is strictly increasing and below 4.
    pub fn check_indices(&self) -> Result<()> {
        let blocks_per_row = self.cols / 4;
        for (i, pair) in self.indices.chunks(2).enumerate() {
            if pair[0] >= pair[1] || pair[1] > 3 {
                return Err(Error::MalformedIndices {
                    row: i / blocks_per_row.max(1),
                    block: i % blocks_per_row.max(1),
                });
            }
        }
        Ok(())
    }

    /// Bytes needed for the values at full `f64` width.
    pub fn value_bytes(&self) -> usize {
        self.values.len() * std::mem::size_of::<f64>()
    }

    /// Bytes needed for the indices packed at 2 bits each.
    pub fn index_bytes(&self) -> usize {
        (self.indices.len() * 2).div_ceil(8)
    }

    /// Packs indices at 2 bits each, little-endian within each byte.
    pub fn packed_indices(&self) -> Vec<u8> {
        pack_2bit(&self.indices)
    }
}

/// Packs values `< 4` four to a byte, first value in the low bits.
pub fn pack_2bit(indices: &[u8]) -> Vec<u8> {
    indices
        .chunks(4)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |byte, (i, &v)| byte | ((v & 0b11) << (2 * i)))
        })
        .collect()
}

/// Inverse of [`pack_2bit`] for `count` values.
pub fn unpack_2bit(packed: &[u8], count: usize) -> Vec<u8> {
    (0..count)
        .map(|i| (packed[i / 4] >> (2 * (i % 4))) & 0b11)
        .collect()
}

/// Keeps the entries of `dense` selected by a valid 2:4 `mask`.
pub fn compress(dense: &Matrix, mask: &BitMask) -> Result<Compressed24> {
    if mask.config() != NmConfig::two_four() {
        return Err(Error::InvalidParameter(
            "compressed storage requires a 2:4 mask".into(),
        ));
    }
    if dense.shape() != mask.shape() {
        return Err(Error::DimensionMismatch(format!(
            "dense {:?} vs mask {:?}",
            dense.shape(),
            mask.shape()
        )));
    }
    validate_mask(mask)?;
    let kept = dense.rows() * dense.cols() / 2;
    let mut values = Vec::with_capacity(kept);
    let mut indices = Vec::with_capacity(kept);
    for (block_vals, block_bits) in dense.as_slice().chunks(4).zip(mask.bits().chunks(4)) {
        for (pos, (&v, &b)) in block_vals.iter().zip(block_bits).enumerate() {
            if b == 1 {
                values.push(v);
                indices.push(pos as u8);
            }
        }
    }
    Compressed24::from_parts(dense.rows(), dense.cols(), values, indices)
}

/// Expands compressed storage back to a dense matrix with zeros at pruned
/// positions.
pub fn decompress(c: &Compressed24) -> Result<Matrix> {
    c.check_indices()?;
    let mut out = Matrix::zeros(c.rows, c.cols);
    let data = out.as_mut_slice();
    for (block, (vals, idx)) in c.values.chunks(2).zip(c.indices.chunks(2)).enumerate() {
        let base = block * 4;
        data[base + idx[0] as usize] = vals[0];
        data[base + idx[1] as usize] = vals[1];
    }
    Ok(out)
}
