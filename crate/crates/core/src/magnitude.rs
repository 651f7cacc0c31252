//! Magnitude-based N:M pruning with an optional column-permutation search.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::conv::WeightMatrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nm_patterns::{BitMask, PatternMatrix};

/// Pattern keeping the `K` largest magnitudes among the first `real`
/// entries of `block`; ties go to the lower element index. Blocks with
/// fewer than `K` real entries get their single admissible pattern.
fn prune_block_real(block: &[f64], real: usize, patterns: &PatternMatrix) -> usize {
    let k = patterns.config().kept();
    if real < k {
        let adm = patterns.admissible(real);
        return adm.iter().position(|&a| a).expect("one admissible pattern");
    }
    let mut order: Vec<usize> = (0..real.min(block.len())).collect();
    order.sort_by(|&a, &b| block[b].abs().total_cmp(&block[a].abs()).then(a.cmp(&b)));
    let mut bits = vec![0u8; patterns.block_len()];
    for &i in &order[..k] {
        bits[i] = 1;
    }
    patterns.index_of(&bits).expect("K-hot column is a pattern")
}

/// Index of the pattern keeping the `K` largest magnitudes of one block.
pub fn magnitude_prune_block(block: &[f64], patterns: &PatternMatrix) -> Result<usize> {
    if block.len() != patterns.block_len() {
        return Err(Error::DimensionMismatch(format!(
            "block of {} for block length {}",
            block.len(),
            patterns.block_len()
        )));
    }
    Ok(prune_block_real(block, block.len(), patterns))
}

/// Blockwise magnitude mask of an aligned weight matrix. Structural
/// columns are never kept unless a block has fewer than `K` real entries.
pub fn magnitude_prune_matrix(w: &WeightMatrix, patterns: &PatternMatrix) -> Result<BitMask> {
    let m = patterns.block_len();
    if !w.cols().is_multiple_of(m) {
        return Err(Error::Misaligned {
            cols: w.cols(),
            block_len: m,
        });
    }
    let real = w.real_cols();
    let per_row = w.cols() / m;
    let mut choices = Vec::with_capacity(w.rows() * per_row);
    for r in 0..w.rows() {
        for (j, block) in w.matrix().row(r).chunks(m).enumerate() {
            let r_in = real.saturating_sub(j * m).min(m);
            choices.push(prune_block_real(block, r_in, patterns));
        }
    }
    BitMask::from_choices(w.rows(), w.cols(), &choices, patterns)
}

/// `Σ|W ⊙ mask| / Σ|W|`; 1 for an all-zero `W`.
pub fn efficacy_score(w: &Matrix, mask: &BitMask) -> Result<f64> {
    if w.shape() != mask.shape() {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} for weights {:?}",
            mask.shape(),
            w.shape()
        )));
    }
    let total: f64 = w.as_slice().iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let kept: f64 = w
        .as_slice()
        .iter()
        .zip(mask.bits())
        .map(|(v, &b)| if b == 1 { v.abs() } else { 0.0 })
        .sum();
    Ok(kept / total)
}

/// Uniformly random valid mask (each block picks an admissible pattern).
pub fn random_mask(
    rows: usize,
    cols: usize,
    real_cols: usize,
    patterns: &PatternMatrix,
    seed: u64,
) -> Result<BitMask> {
    let m = patterns.block_len();
    if !cols.is_multiple_of(m) {
        return Err(Error::Misaligned { cols, block_len: m });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_row = cols / m;
    let options: Vec<Vec<usize>> = (0..per_row)
        .map(|j| {
            let adm = patterns.admissible(real_cols.saturating_sub(j * m).min(m));
            (0..adm.len()).filter(|&p| adm[p]).collect()
        })
        .collect();
    let mut choices = Vec::with_capacity(rows * per_row);
    for _ in 0..rows {
        for opts in &options {
            choices.push(*opts.choose(&mut rng).expect("admissible pattern"));
        }
    }
    BitMask::from_choices(rows, cols, &choices, patterns)
}

/// Column permutation found by [`permutation_search`]. Column `c` of the
/// permuted matrix is column `perm[c]` of the original.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationPlan {
    pub perm: Vec<usize>,
    pub inverse: Vec<usize>,
    pub score_before: f64,
    pub score_after: f64,
    pub swaps_evaluated: usize,
    pub swaps_applied: usize,
}

impl PermutationPlan {
    pub fn identity(cols: usize, score: f64) -> Self {
        Self {
            perm: (0..cols).collect(),
            inverse: (0..cols).collect(),
            score_before: score,
            score_after: score,
            swaps_evaluated: 0,
            swaps_applied: 0,
        }
    }

    pub fn apply(&self, w: &Matrix) -> Result<Matrix> {
        permute_columns(w, &self.perm)
    }

    pub fn unapply(&self, w: &Matrix) -> Result<Matrix> {
        permute_columns(w, &self.inverse)
    }
}

/// `out[:, c] = w[:, perm[c]]`; `perm` may cover only a prefix of the
/// columns, the rest stay in place.
pub fn permute_columns(w: &Matrix, perm: &[usize]) -> Result<Matrix> {
    if perm.len() > w.cols() {
        return Err(Error::DimensionMismatch(format!(
            "permutation of {} for {} columns",
            perm.len(),
            w.cols()
        )));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidParameter("not a permutation".into()));
        }
    }
    Ok(Matrix::from_fn(w.rows(), w.cols(), |r, c| {
        w[(r, if c < perm.len() { perm[c] } else { c })]
    }))
}

fn block_retained(w: &Matrix, real: usize, patterns: &PatternMatrix, r: usize, j: usize) -> f64 {
    let m = patterns.block_len();
    let block = &w.row(r)[j * m..(j + 1) * m];
    let p = prune_block_real(block, real.saturating_sub(j * m).min(m), patterns);
    patterns
        .kept_positions(p)
        .iter()
        .map(|&i| block[i as usize].abs())
        .sum()
}

/// Greedy search over swaps of two real columns in different blocks. Each
/// round evaluates candidate swaps (lowest pair first, each costing one unit
/// of `budget`) and applies the best strict improvement of the magnitude
/// mask's retained mass; ties go to the lowest pair. Stops when a round
/// finds no improvement or the budget runs out. Returns the plan and the
/// magnitude mask of the permuted matrix.
pub fn permutation_search(
    w: &WeightMatrix,
    patterns: &PatternMatrix,
    budget: usize,
) -> Result<(PermutationPlan, BitMask)> {
    let m = patterns.block_len();
    let base_mask = magnitude_prune_matrix(w, patterns)?;
    let base_score = efficacy_score(w.matrix(), &base_mask)?;
    let real = w.real_cols();
    let mut plan = PermutationPlan::identity(real, base_score);
    let mut cur = w.matrix().clone();
    let pairs: Vec<(usize, usize)> = (0..real)
        .flat_map(|a| ((a + 1)..real).map(move |b| (a, b)))
        .filter(|&(a, b)| a / m != b / m)
        .collect();
    let mut remaining = budget;
    while remaining > 0 && !pairs.is_empty() {
        let take = remaining.min(pairs.len());
        remaining -= take;
        plan.swaps_evaluated += take;
        let snapshot = &cur;
        let gains: Vec<f64> = pairs[..take]
            .par_iter()
            .map(|&(a, b)| {
                let (ja, jb) = (a / m, b / m);
                let mut gain = 0.0;
                let mut blk_a = vec![0.0; m];
                let mut blk_b = vec![0.0; m];
                for r in 0..snapshot.rows() {
                    let row = snapshot.row(r);
                    blk_a.copy_from_slice(&row[ja * m..(ja + 1) * m]);
                    blk_b.copy_from_slice(&row[jb * m..(jb + 1) * m]);
                    std::mem::swap(&mut blk_a[a % m], &mut blk_b[b % m]);
                    let after =
                        retained(&blk_a, real, ja, patterns) + retained(&blk_b, real, jb, patterns);
                    let before = block_retained(snapshot, real, patterns, r, ja)
                        + block_retained(snapshot, real, patterns, r, jb);
                    gain += after - before;
                }
                gain
            })
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (i, &g) in gains.iter().enumerate() {
            if g > 1e-12 * (1.0 + g.abs()) && best.is_none_or(|(_, bg)| g > bg) {
                best = Some((i, g));
            }
        }
        let Some((i, _)) = best else { break };
        let (a, b) = pairs[i];
        for r in 0..cur.rows() {
            cur.row_mut(r).swap(a, b);
        }
        plan.perm.swap(a, b);
        plan.swaps_applied += 1;
    }
    for (c, &p) in plan.perm.iter().enumerate() {
        plan.inverse[p] = c;
    }
    let permuted = WeightMatrix::new(cur, real)?;
    let mask = magnitude_prune_matrix(&permuted, patterns)?;
    let score = efficacy_score(permuted.matrix(), &mask)?;
    // never report a regression from accumulated rounding
    plan.score_after = score.max(base_score);
    if score < base_score {
        return Ok((PermutationPlan::identity(real, base_score), base_mask));
    }
    Ok((plan, mask))
}

fn retained(block: &[f64], real: usize, j: usize, patterns: &PatternMatrix) -> f64 {
    let m = patterns.block_len();
    let p = prune_block_real(block, real.saturating_sub(j * m).min(m), patterns);
    patterns
        .kept_positions(p)
        .iter()
        .map(|&i| block[i as usize].abs())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nm_patterns::{enumerate_patterns, validate_mask, NmConfig};

    fn p24() -> PatternMatrix {
        enumerate_patterns(NmConfig::two_four())
    }

    #[test]
    fn block_examples() {
        let p = p24();
        let kept = |b: &[f64]| {
            p.kept_positions(magnitude_prune_block(b, &p).unwrap())
                .to_vec()
        };
        assert_eq!(kept(&[1.0, -5.0, 2.0, 0.1]), vec![1, 2]);
        assert_eq!(kept(&[3.0; 4]), vec![0, 1]);
        assert_eq!(kept(&[0.0; 4]), vec![0, 1]);
        assert!(magnitude_prune_block(&[1.0; 3], &p).is_err());
    }

    #[test]
    fn structural_columns_are_dropped() {
        let p = p24();
        let m = Matrix::from_rows(&[vec![0.0, 0.0, 1.0, 0.0, 5.0, 3.0, 1.0, 0.0]]).unwrap();
        let w = WeightMatrix::new(m, 7).unwrap();
        let mask = magnitude_prune_matrix(&w, &p).unwrap();
        validate_mask(&mask).unwrap();
        assert_eq!(mask.bits(), &[1, 0, 1, 0, 1, 1, 0, 0]);
    }

    #[test]
    fn efficacy_edge_cases() {
        let p = p24();
        let w = Matrix::from_rows(&[vec![10.0, 10.0, 1e-6, 1e-6]]).unwrap();
        let mask = magnitude_prune_matrix(&WeightMatrix::dense(w.clone()), &p).unwrap();
        assert!(efficacy_score(&w, &mask).unwrap() > 0.999_999);
        let zeros = BitMask::from_bits(1, 4, vec![0; 4], NmConfig::two_four()).unwrap();
        assert_eq!(efficacy_score(&w, &zeros).unwrap(), 0.0);
        assert_eq!(efficacy_score(&Matrix::zeros(1, 4), &zeros).unwrap(), 1.0);
    }

    #[test]
    fn zero_budget_is_identity() {
        let p = p24();
        let w = WeightMatrix::dense(Matrix::from_fn(3, 8, |r, c| ((r * 7 + c * 3) % 5) as f64));
        let (plan, mask) = permutation_search(&w, &p, 0).unwrap();
        assert_eq!(plan.perm, (0..8).collect::<Vec<_>>());
        assert_eq!(plan.score_before, plan.score_after);
        assert_eq!(mask, magnitude_prune_matrix(&w, &p).unwrap());
    }

    #[test]
    fn permutation_roundtrip() {
        let w = Matrix::from_fn(2, 8, |r, c| (r * 8 + c) as f64);
        let plan = PermutationPlan {
            perm: vec![3, 0, 1, 2, 7, 6, 5, 4],
            inverse: vec![1, 2, 3, 0, 7, 6, 5, 4],
            score_before: 0.0,
            score_after: 0.0,
            swaps_evaluated: 0,
            swaps_applied: 0,
        };
        assert_eq!(plan.unapply(&plan.apply(&w).unwrap()).unwrap(), w);
        assert!(permute_columns(&w, &[0, 0]).is_err());
    }

    #[test]
    fn random_masks_are_valid() {
        let p = p24();
        for seed in 0..10 {
            let m = random_mask(3, 12, 10, &p, seed).unwrap();
            validate_mask(&m).unwrap();
            for r in 0..3 {
                for c in 10..12 {
                    assert_eq!(m.get(r, c), 0);
                }
            }
        }
    }
}
