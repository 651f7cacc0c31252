//! Procedural seven-segment digit images for offline experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::IdxDataset;

// segments a..g lit for each digit
const DIGITS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

/// Generator settings. Images are `side x side` with a digit drawn from
/// segments, randomly shifted, thinned and noised.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub side: usize,
    pub count: usize,
    pub seed: u64,
    /// Maximum shift in pixels along each axis.
    pub jitter: i32,
    /// Probability that a stroke pixel is dropped.
    pub dropout: f64,
    /// Peak amplitude of the additive background noise (0-255).
    pub noise: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            side: 12,
            count: 2000,
            seed: 0,
            jitter: 1,
            dropout: 0.1,
            noise: 60,
        }
    }
}

fn segment_pixels(seg: usize, side: i32) -> Vec<(i32, i32)> {
    let (left, right) = (side / 4, side - 1 - side / 4);
    let (top, bottom) = (1, side - 2);
    let mid = (top + bottom) / 2;
    let h = |r: i32| (left..=right).map(|c| (r, c)).collect::<Vec<_>>();
    let v = |c: i32, r0: i32, r1: i32| (r0..=r1).map(|r| (r, c)).collect::<Vec<_>>();
    match seg {
        0 => h(top),
        1 => v(right, top, mid),
        2 => v(right, mid, bottom),
        3 => h(bottom),
        4 => v(left, mid, bottom),
        5 => v(left, top, mid),
        _ => h(mid),
    }
}

/// Balanced labels cycling through the ten digits.
pub fn synth_digits(config: &SynthConfig) -> IdxDataset {
    let side = config.side;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut images = Vec::with_capacity(config.count * side * side);
    let mut labels = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let digit = i % 10;
        let mut img = vec![0u8; side * side];
        for p in img.iter_mut() {
            if config.noise > 0 {
                *p = rng.random_range(0..=config.noise);
            }
        }
        let dx = rng.random_range(-config.jitter..=config.jitter);
        let dy = rng.random_range(-config.jitter..=config.jitter);
        let ink: u8 = rng.random_range(170..=255);
        for (seg, &lit) in DIGITS[digit].iter().enumerate() {
            if !lit {
                continue;
            }
            for (r, c) in segment_pixels(seg, side as i32) {
                let (r, c) = (r + dy, c + dx);
                if r < 0 || c < 0 || r >= side as i32 || c >= side as i32 {
                    continue;
                }
                if rng.random_bool(config.dropout) {
                    continue;
                }
                let px = &mut img[r as usize * side + c as usize];
                *px = (*px).max(ink);
            }
        }
        images.extend(img);
        labels.push(digit as u8);
    }
    IdxDataset {
        rows: side,
        cols: side,
        images,
        labels,
        mean: 0.0,
        std: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let cfg = SynthConfig {
            count: 50,
            ..Default::default()
        };
        let a = synth_digits(&cfg);
        assert_eq!(a, synth_digits(&cfg));
        assert_eq!(a.len(), 50);
        for d in 0..10u8 {
            assert_eq!(a.labels.iter().filter(|&&l| l == d).count(), 5);
        }
    }

    #[test]
    fn digits_differ() {
        let cfg = SynthConfig {
            count: 10,
            noise: 0,
            dropout: 0.0,
            jitter: 0,
            ..Default::default()
        };
        let d = synth_digits(&cfg);
        for i in 0..10 {
            for j in (i + 1)..10 {
                assert_ne!(d.image(i), d.image(j), "{i} vs {j}");
            }
        }
    }
}
