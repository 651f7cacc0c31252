//! Compositional classifier, its gradients, and the training loops.

mod classifier;
mod grad;
mod optim;
mod train;

pub use classifier::{
    init_conv, init_linear, small_convnet, softmax, Activation, CompositionalClassifier, Layer,
    LayerKind, Mode,
};
pub use grad::{
    batch_loss, cross_entropy, grads_wrt_logits, param_grads, ParamGrads, Sample, PROB_FLOOR,
};
pub use optim::{lr_schedule, AdamWConfig, AdamWState};
pub use train::{
    evaluate_topk, freeze_all, split_holdout, top_k, train_masks, train_weights, EpochRecord,
    TrainConfig, TrainHistory, TrainOutcome, WeightTrainConfig,
};
