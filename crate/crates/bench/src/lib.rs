//! Operand generators shared by the criterion benchmarks.

use nmsparse::{KernelStack, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random `c_in x side x side` input and `c_out` kernels of size `k x k`.
pub fn conv_operands(
    c_in: usize,
    c_out: usize,
    side: usize,
    k: usize,
    seed: u64,
) -> (Tensor3, KernelStack) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..c_in * side * side)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let w: Vec<f64> = (0..c_out * c_in * k * k)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    (
        Tensor3::new(c_in, side, side, x).expect("consistent shape"),
        KernelStack::new(c_out, c_in, k, k, w).expect("consistent shape"),
    )
}
