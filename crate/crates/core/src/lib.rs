//! Learned N:M semi-structured sparsity for convolutional classifiers.
//!
//! Masks are chosen per block of `M` consecutive weights from the `C(M, K)`
//! patterns that keep `K` of them. Choices are learned through a
//! Gumbel-Softmax relaxation over frozen weights, then frozen into bit
//! masks that run through a compressed 2:4 kernel.

pub mod conv;
pub mod error;
pub mod io;
pub mod magnitude;
pub mod mask_sampler;
pub mod matrix;
pub mod model;
pub mod nm_patterns;
pub mod sparse_kernel;
pub mod stability;
pub mod synth;

pub use conv::{
    conv_direct, conv_matmul, kernels_to_weight_matrix, masked_conv, unfold, KernelStack, MaskRef,
    Tensor3, UnfoldedInput, WeightMatrix,
};
pub use error::{Error, Result};
pub use io::{FormatError, IdxDataset, MaskRecord, MaskSet};
pub use magnitude::{
    efficacy_score, magnitude_prune_block, magnitude_prune_matrix, permutation_search, random_mask,
    PermutationPlan,
};
pub use mask_sampler::{
    freeze, gs_hard_sample, gs_soft_sample, sample_gumbel, FreezeMode, GumbelNoise, HardChoice,
    MaskLogits, NoiseKey, SoftChoice,
};
pub use matrix::Matrix;
pub use model::{
    evaluate_topk, train_masks, Activation, CompositionalClassifier, Layer, LayerKind, Mode,
    Sample, TrainConfig, TrainHistory,
};
pub use nm_patterns::{
    compress, decompress, enumerate_patterns, mask_stats, pattern_count, validate_mask, BitMask,
    Compressed24, MaskStats, NmConfig, PatternMatrix,
};
pub use sparse_kernel::{bench_compare, flop_count, spmm, BenchConfig, BenchReport, FlopReport};
pub use stability::{
    confidence, lipschitz_bound, mask_to_perturbation, masking_stability,
    perturbed_lipschitz_bound, stability_margin, update_masking_stability, NormProfile,
    StabilityCertificate,
};
