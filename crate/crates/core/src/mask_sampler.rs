//! Gumbel-Softmax choice distributions over block patterns.
//!
//! Every block of a maskable layer carries one logit per pattern. Training
//! draws soft (relaxed) choices, inference freezes a single hard choice per
//! block. Noise comes from a counter-based stream keyed by
//! `(seed, draw counter, layer id)` and addressed by `(block, slot)`, so a
//! value never depends on evaluation order.

use rand::distr::{Distribution, Uniform};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nm_patterns::{BitMask, PatternMatrix};

/// Smallest temperature accepted anywhere in training.
pub const MIN_TEMPERATURE: f64 = 1e-3;

/// Address of one noise stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub layer: u32,
    pub counter: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, layer: u32, counter: u64) -> Self {
        Self {
            seed,
            layer,
            counter,
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.counter.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.layer as u64);
        rng
    }

    /// Uniform draw on the open interval (0, 1) at position `index`.
    pub fn uniform_at(&self, index: u64) -> f64 {
        let mut rng = self.rng();
        rng.set_word_pos(2 * index as u128);
        open_unit(rng.next_u64())
    }
}

#[inline]
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// The Gumbel(0, 1) quantile transform `-ln(-ln u)`.
#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// `block_count x n` Gumbel(0, 1) draws.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise {
    n: usize,
    values: Vec<f64>,
}

impl GumbelNoise {
    /// All-zero noise: sampling then reduces to the mode of the logits.
    pub fn zeros(block_count: usize, n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; block_count * n],
        }
    }

    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || !values.len().is_multiple_of(n) {
            return Err(Error::DimensionMismatch(format!(
                "{} noise values with {n} per block",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gumbel noise".into()));
        }
        Ok(Self { n, values })
    }

    pub fn block(&self, b: usize) -> &[f64] {
        &self.values[b * self.n..(b + 1) * self.n]
    }

    pub fn block_count(&self) -> usize {
        self.values.len() / self.n
    }

    pub fn per_block(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Draws Gumbel noise for `block_count` blocks of `n` slots. Slot `i` of
/// block `b` is the `(b * n + i)`-th draw of the stream named by `key`.
pub fn sample_gumbel(block_count: usize, n: usize, key: NoiseKey) -> Result<GumbelNoise> {
    if block_count == 0 || n == 0 {
        return Err(Error::InvalidParameter(
            "noise counts must be positive".into(),
        ));
    }
    let mut rng = key.rng();
    let values = (0..block_count * n)
        .map(|_| gumbel_from_uniform(open_unit(rng.next_u64())))
        .collect();
    Ok(GumbelNoise { n, values })
}

/// Noise for a single `(block, slot)`; equals the corresponding entry of
/// [`sample_gumbel`].
pub fn gumbel_at(key: NoiseKey, n: usize, block: usize, slot: usize) -> f64 {
    gumbel_from_uniform(key.uniform_at((block * n + slot) as u64))
}

/// Trainable per-block choice logits of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    layer_id: u32,
    rows: usize,
    cols: usize,
    real_cols: usize,
    n: usize,
    block_len: usize,
    logits: Vec<f64>,
    temperature: f64,
    // indexed by block position within a row
    admissible: Vec<Vec<bool>>,
}

impl MaskLogits {
    /// Zero logits, i.e. a uniform choice distribution.
    pub fn uniform(
        layer_id: u32,
        rows: usize,
        real_cols: usize,
        patterns: &PatternMatrix,
        temperature: f64,
    ) -> Result<Self> {
        check_temperature(temperature)?;
        let m = patterns.block_len();
        let cols = patterns.config().aligned_width(real_cols);
        let blocks_per_row = cols / m;
        let admissible = (0..blocks_per_row)
            .map(|j| patterns.admissible(real_cols.saturating_sub(j * m).min(m)))
            .collect();
        let n = patterns.pattern_count();
        Ok(Self {
            layer_id,
            rows,
            cols,
            real_cols,
            n,
            block_len: m,
            logits: vec![0.0; rows * blocks_per_row * n],
            temperature,
            admissible,
        })
    }

    /// Glorot-uniform logits: each block's `n`-vector is drawn from
    /// `U(-a, a)` with `a = sqrt(6 / (n + n))`.
    pub fn glorot(
        layer_id: u32,
        rows: usize,
        real_cols: usize,
        patterns: &PatternMatrix,
        temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut out = Self::uniform(layer_id, rows, real_cols, patterns, temperature)?;
        let n = out.n as f64;
        let limit = (6.0 / (n + n)).sqrt();
        let dist = Uniform::new(-limit, limit).expect("finite bounds");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((layer_id as u64) << 32));
        for v in &mut out.logits {
            *v = dist.sample(&mut rng);
        }
        Ok(out)
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    /// `(rows, padded_cols)` of the layer's weight matrix.
    pub fn layer_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn real_cols(&self) -> usize {
        self.real_cols
    }

    pub fn pattern_count(&self) -> usize {
        self.n
    }

    pub fn block_count(&self) -> usize {
        self.logits.len() / self.n
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        check_temperature(temperature)?;
        self.temperature = temperature;
        Ok(())
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn block_logits(&self, b: usize) -> &[f64] {
        &self.logits[b * self.n..(b + 1) * self.n]
    }

    pub fn block_logits_mut(&mut self, b: usize) -> &mut [f64] {
        &mut self.logits[b * self.n..(b + 1) * self.n]
    }

    /// Which patterns block `b` may choose.
    pub fn admissible(&self, b: usize) -> &[bool] {
        &self.admissible[b % self.admissible.len()]
    }

    /// Mean Shannon entropy (nats) of the per-block choice distributions
    /// `softmax(logits)` restricted to admissible patterns.
    pub fn mean_entropy(&self) -> f64 {
        let blocks = self.block_count();
        if blocks == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut probs = vec![0.0; self.n];
        for b in 0..blocks {
            softmax_admissible(self.block_logits(b), self.admissible(b), 1.0, &mut probs);
            total -= probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
        }
        total / blocks as f64
    }

    fn check_noise(&self, noise: &GumbelNoise) -> Result<()> {
        if noise.n != self.n || noise.block_count() != self.block_count() {
            return Err(Error::DimensionMismatch(format!(
                "noise {}x{} vs logits {}x{}",
                noise.block_count(),
                noise.n,
                self.block_count(),
                self.n
            )));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t >= MIN_TEMPERATURE) {
        return Err(Error::InvalidParameter(format!(
            "temperature {t} below {MIN_TEMPERATURE}"
        )));
    }
    Ok(())
}

/// Stable softmax of `(scores)/tau` over admissible slots; others get 0.
fn softmax_admissible(scores: &[f64], admissible: &[bool], tau: f64, out: &mut [f64]) {
    let max = scores
        .iter()
        .zip(admissible)
        .filter(|(_, &a)| a)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for ((o, &s), &a) in out.iter_mut().zip(scores).zip(admissible) {
        *o = if a { ((s - max) / tau).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Relaxed per-block choices on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftChoice {
    n: usize,
    z: Vec<f64>,
}

impl SoftChoice {
    pub fn block(&self, b: usize) -> &[f64] {
        &self.z[b * self.n..(b + 1) * self.n]
    }

    pub fn block_count(&self) -> usize {
        self.z.len() / self.n
    }

    pub fn pattern_count(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }
}

/// One pattern index per block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardChoice {
    n: usize,
    choices: Vec<usize>,
}

impl HardChoice {
    pub fn new(n: usize, choices: Vec<usize>) -> Result<Self> {
        if choices.iter().any(|&c| c >= n) {
            return Err(Error::InvalidParameter("choice index out of range".into()));
        }
        Ok(Self { n, choices })
    }

    pub fn choices(&self) -> &[usize] {
        &self.choices
    }

    /// The equivalent one-hot soft choice.
    pub fn to_soft(&self) -> SoftChoice {
        let mut z = vec![0.0; self.choices.len() * self.n];
        for (b, &c) in self.choices.iter().enumerate() {
            z[b * self.n + c] = 1.0;
        }
        SoftChoice { n: self.n, z }
    }
}

/// Per block, `softmax((g + logits) / tau)` over admissible patterns.
pub fn gs_soft_sample(logits: &MaskLogits, noise: &GumbelNoise) -> Result<SoftChoice> {
    logits.check_noise(noise)?;
    if logits.logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mask logits".into()));
    }
    let n = logits.n;
    let mut z = vec![0.0; logits.logits.len()];
    let mut scores = vec![0.0; n];
    for b in 0..logits.block_count() {
        for ((s, &g), &l) in scores
            .iter_mut()
            .zip(noise.block(b))
            .zip(logits.block_logits(b))
        {
            *s = g + l;
        }
        softmax_admissible(
            &scores,
            logits.admissible(b),
            logits.temperature,
            &mut z[b * n..(b + 1) * n],
        );
    }
    Ok(SoftChoice { n, z })
}

/// Per block, the admissible argmax of `g + logits`; ties go to the lowest
/// pattern index.
pub fn gs_hard_sample(logits: &MaskLogits, noise: &GumbelNoise) -> Result<HardChoice> {
    logits.check_noise(noise)?;
    let choices = (0..logits.block_count())
        .map(|b| {
            let mut best = usize::MAX;
            let mut best_score = f64::NEG_INFINITY;
            for (i, ((&g, &l), &a)) in noise
                .block(b)
                .iter()
                .zip(logits.block_logits(b))
                .zip(logits.admissible(b))
                .enumerate()
            {
                let s = g + l;
                if a && (best == usize::MAX || s > best_score) {
                    best = i;
                    best_score = s;
                }
            }
            best
        })
        .collect();
    Ok(HardChoice {
        n: logits.n,
        choices,
    })
}

fn check_layout(
    blocks: usize,
    n: usize,
    rows: usize,
    cols: usize,
    patterns: &PatternMatrix,
) -> Result<()> {
    let m = patterns.block_len();
    if !cols.is_multiple_of(m) {
        return Err(Error::Misaligned { cols, block_len: m });
    }
    if n != patterns.pattern_count() || blocks * m != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "{blocks} choices of {n} patterns for a {rows}x{cols} layer"
        )));
    }
    Ok(())
}

/// Soft mask: block `b` holds `D z_b`, laid out row-major.
pub fn assemble_soft(
    choice: &SoftChoice,
    patterns: &PatternMatrix,
    rows: usize,
    cols: usize,
) -> Result<Matrix> {
    check_layout(choice.block_count(), choice.n, rows, cols, patterns)?;
    let m = patterns.block_len();
    let mut out = Matrix::zeros(rows, cols);
    let data = out.as_mut_slice();
    for b in 0..choice.block_count() {
        let block = &mut data[b * m..(b + 1) * m];
        for (p, &zp) in choice.block(b).iter().enumerate() {
            if zp == 0.0 {
                continue;
            }
            for &pos in patterns.kept_positions(p) {
                block[pos as usize] += zp;
            }
        }
    }
    Ok(out)
}

/// Hard mask: block `b` holds pattern column `choices[b]`.
pub fn assemble_hard(
    choice: &HardChoice,
    patterns: &PatternMatrix,
    rows: usize,
    cols: usize,
) -> Result<BitMask> {
    check_layout(choice.choices.len(), choice.n, rows, cols, patterns)?;
    BitMask::from_choices(rows, cols, &choice.choices, patterns)
}

/// Chain rule through [`assemble_soft`]: per block and pattern, the sum of
/// the mask gradient over the pattern's kept positions.
pub fn assemble_soft_backward(grad_mask: &Matrix, patterns: &PatternMatrix) -> Vec<f64> {
    let m = patterns.block_len();
    let n = patterns.pattern_count();
    let blocks = grad_mask.as_slice().len() / m;
    let mut out = vec![0.0; blocks * n];
    for (b, block) in grad_mask.as_slice().chunks(m).enumerate() {
        for p in 0..n {
            out[b * n + p] = patterns
                .kept_positions(p)
                .iter()
                .map(|&pos| block[pos as usize])
                .sum();
        }
    }
    out
}

/// Chain rule through [`gs_soft_sample`]: given `dL/dz`, returns `dL/dlogits`
/// `= z ⊙ (dz - <z, dz>) / tau` per block.
pub fn gs_soft_backward(choice: &SoftChoice, grad_z: &[f64], temperature: f64) -> Vec<f64> {
    let n = choice.n;
    let mut out = vec![0.0; choice.z.len()];
    for b in 0..choice.block_count() {
        let z = choice.block(b);
        let gz = &grad_z[b * n..(b + 1) * n];
        let dot: f64 = z.iter().zip(gz).map(|(a, g)| a * g).sum();
        for i in 0..n {
            out[b * n + i] = z[i] * (gz[i] - dot) / temperature;
        }
    }
    out
}

/// How the final inference mask is drawn from trained logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeMode {
    /// Mode of each block's distribution (zero noise).
    Deterministic,
    /// One Gumbel-Max draw per block from the recorded seed.
    Stochastic { seed: u64 },
}

impl FreezeMode {
    pub fn flag(&self) -> u8 {
        match self {
            FreezeMode::Deterministic => 0,
            FreezeMode::Stochastic { .. } => 1,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            FreezeMode::Deterministic => 0,
            FreezeMode::Stochastic { seed } => *seed,
        }
    }
}

/// Counter value reserved for the freeze draw.
pub const FREEZE_COUNTER: u64 = u64::MAX;

/// Samples the blocks one final time and returns the frozen bit mask.
pub fn freeze(logits: &MaskLogits, patterns: &PatternMatrix, mode: FreezeMode) -> Result<BitMask> {
    let noise = match mode {
        FreezeMode::Deterministic => GumbelNoise::zeros(logits.block_count(), logits.n),
        FreezeMode::Stochastic { seed } => sample_gumbel(
            logits.block_count(),
            logits.n,
            NoiseKey::new(seed, logits.layer_id, FREEZE_COUNTER),
        )?,
    };
    let hard = gs_hard_sample(logits, &noise)?;
    assemble_hard(&hard, patterns, logits.rows, logits.cols)
}

/// Exponential temperature anneal from `start` to `end` as `progress` goes
/// from 0 to 1.
pub fn annealed_temperature(start: f64, end: f64, progress: f64) -> f64 {
    let t = progress.clamp(0.0, 1.0);
    start * (end / start).powf(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nm_patterns::{enumerate_patterns, validate_mask, NmConfig};

    fn patterns() -> PatternMatrix {
        enumerate_patterns(NmConfig::two_four())
    }

    // An n:1 configuration has exactly n patterns, so one block of it
    // carries an arbitrary n-vector of logits.
    fn single_block(logits: &[f64], tau: f64) -> MaskLogits {
        let n = logits.len();
        let cfg = NmConfig::new(n, 1).unwrap();
        let p = enumerate_patterns(cfg);
        let mut l = MaskLogits::uniform(0, 1, n, &p, tau).unwrap();
        l.logits_mut().copy_from_slice(logits);
        l
    }

    #[test]
    fn gumbel_fixed_point() {
        assert_eq!(gumbel_from_uniform((-1.0f64).exp()), 0.0);
    }

    #[test]
    fn noise_is_deterministic_and_random_access() {
        let key = NoiseKey::new(7, 3, 11);
        let a = sample_gumbel(5, 6, key).unwrap();
        let b = sample_gumbel(5, 6, key).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.block(3)[4], gumbel_at(key, 6, 3, 4));
        let other = sample_gumbel(5, 6, NoiseKey::new(7, 4, 11)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn soft_uniform_with_equal_logits() {
        let l = single_block(&[0.3, 0.3, 0.3], 0.7);
        let z = gs_soft_sample(&l, &GumbelNoise::zeros(1, 3)).unwrap();
        for &v in z.block(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_recovers_normalized_pi() {
        let pi: [f64; 3] = [0.5, 0.25, 0.25];
        let l = single_block(&pi.map(f64::ln), 1.0);
        let z = gs_soft_sample(&l, &GumbelNoise::zeros(1, 3)).unwrap();
        for (a, b) in z.block(0).iter().zip(pi) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_rejects_non_finite_logits() {
        let l = single_block(&[0.0, f64::NAN], 1.0);
        assert!(matches!(
            gs_soft_sample(&l, &GumbelNoise::zeros(1, 2)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn hard_examples() {
        let pi: [f64; 3] = [0.1, 0.7, 0.2];
        let l = single_block(&pi.map(f64::ln), 1.0);
        let h = gs_hard_sample(&l, &GumbelNoise::zeros(1, 3)).unwrap();
        assert_eq!(h.choices(), &[1]);
        let l = single_block(&[0.0; 3], 1.0);
        let h = gs_hard_sample(&l, &GumbelNoise::zeros(1, 3)).unwrap();
        assert_eq!(h.choices(), &[0]);
    }

    #[test]
    fn temperature_floor_enforced() {
        let p = patterns();
        assert!(MaskLogits::uniform(0, 1, 4, &p, 1e-4).is_err());
        assert!(MaskLogits::uniform(0, 1, 4, &p, 1e-3).is_ok());
    }

    #[test]
    fn assemble_examples() {
        let p = patterns();
        let h = HardChoice::new(6, vec![0]).unwrap();
        let m = assemble_hard(&h, &p, 1, 4).unwrap();
        assert_eq!(m.bits(), &[1, 1, 0, 0]);

        let l = MaskLogits::uniform(0, 2, 8, &p, 1.0).unwrap();
        let z = gs_soft_sample(&l, &GumbelNoise::zeros(4, 6)).unwrap();
        let soft = assemble_soft(&z, &p, 2, 8).unwrap();
        for &v in soft.as_slice() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!(assemble_soft(&z, &p, 2, 12).is_err());
    }

    #[test]
    fn structural_columns_are_never_kept_when_avoidable() {
        let p = patterns();
        // 7 real columns -> padded to 8; second block has 3 real entries
        let l = MaskLogits::glorot(0, 3, 7, &p, 0.5, 9).unwrap();
        for c in 0..20 {
            let noise = sample_gumbel(l.block_count(), 6, NoiseKey::new(1, 0, c)).unwrap();
            let h = gs_hard_sample(&l, &noise).unwrap();
            let m = assemble_hard(&h, &p, 3, 8).unwrap();
            validate_mask(&m).unwrap();
            for r in 0..3 {
                assert_eq!(m.get(r, 7), 0);
            }
            let soft = assemble_soft(&gs_soft_sample(&l, &noise).unwrap(), &p, 3, 8).unwrap();
            for r in 0..3 {
                assert_eq!(soft[(r, 7)], 0.0);
            }
        }
    }

    #[test]
    fn freeze_uniform_deterministic_is_pattern_zero() {
        let p = patterns();
        let l = MaskLogits::uniform(0, 2, 8, &p, 0.1).unwrap();
        let m = freeze(&l, &p, FreezeMode::Deterministic).unwrap();
        assert_eq!(m.choices(&p).unwrap(), vec![0; 4]);
    }

    #[test]
    fn freeze_stochastic_is_reproducible() {
        let p = patterns();
        let l = MaskLogits::glorot(2, 4, 16, &p, 0.1, 3).unwrap();
        let a = freeze(&l, &p, FreezeMode::Stochastic { seed: 5 }).unwrap();
        let b = freeze(&l, &p, FreezeMode::Stochastic { seed: 5 }).unwrap();
        assert_eq!(a, b);
        validate_mask(&a).unwrap();
    }

    #[test]
    fn anneal_endpoints() {
        assert!((annealed_temperature(1.0, 0.1, 0.0) - 1.0).abs() < 1e-15);
        assert!((annealed_temperature(1.0, 0.1, 1.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn entropy_of_uniform_logits() {
        let p = patterns();
        let l = MaskLogits::uniform(0, 1, 4, &p, 1.0).unwrap();
        assert!((l.mean_entropy() - 6f64.ln()).abs() < 1e-12);
    }
}
