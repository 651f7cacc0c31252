use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mask_sampler::{annealed_temperature, freeze, FreezeMode};
use crate::nm_patterns::BitMask;

use super::classifier::{CompositionalClassifier, Mode};
use super::grad::{grads_wrt_logits, param_grads, Sample};
use super::optim::{lr_schedule, AdamWConfig, AdamWState};

/// Mask-training hyperparameters. Defaults follow the large-scale recipe:
/// AdamW at `η = 1.0`, `β1 = 0.9`, `λ = 1e-4`, decay by 0.1 every 3 epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// AdamW β1.
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_epochs: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    /// Exponential anneal `(start, end)` over the run instead of a fixed
    /// temperature.
    pub anneal: Option<(f64, f64)>,
    pub seed: u64,
    pub freeze: FreezeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            step_epochs: 3,
            gamma: 0.1,
            epochs: 6,
            batch_size: 32,
            temperature: 0.1,
            anneal: None,
            seed: 0,
            freeze: FreezeMode::Deterministic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("temperature", self.temperature),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.momentum >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::InvalidParameter(
                "moment decay rates must be below 1".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.step_epochs == 0 {
            return Err(Error::InvalidParameter(
                "epochs, batch_size and step_epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.momentum,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.learning_rate, epoch, self.step_epochs, self.gamma)
    }

    fn temperature_at(&self, epoch: usize) -> f64 {
        match self.anneal {
            Some((start, end)) if self.epochs > 1 => {
                annealed_temperature(start, end, epoch as f64 / (self.epochs - 1) as f64)
            }
            Some((_, end)) => end,
            None => self.temperature,
        }
    }
}

/// Summary of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub mean_loss: f64,
    /// Hold-out accuracies; `None` without a hold-out split.
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    /// Mean per-block choice entropy over all maskable layers (nats).
    pub mask_entropy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Tab-separated records with a header line.
    pub fn to_records(&self) -> String {
        let mut out = String::from("epoch\tlr\ttau\tloss\ttop1\ttop5\tentropy\n");
        let acc = |a: Option<f64>| a.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.6e}\t{:.6}\t{:.6}\t{}\t{}\t{:.6}\n",
                e.epoch,
                e.learning_rate,
                e.temperature,
                e.mean_loss,
                acc(e.top1),
                acc(e.top5),
                e.mask_entropy
            ));
        }
        out
    }
}

/// Result of mask training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Frozen masks of the maskable layers, in layer order.
    pub masks: Vec<(usize, BitMask)>,
}

/// Deterministic holdout split: shuffles indices with `seed` and moves the
/// first `round(fraction * len)` samples (at least one, when possible) to
/// the second part.
pub fn split_holdout(samples: &[Sample], fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = (fraction.clamp(0.0, 1.0) * samples.len() as f64).round() as usize;
    if held == 0 && fraction > 0.0 && samples.len() > 1 {
        held = 1;
    }
    let (h, t) = idx.split_at(held);
    let mut t = t.to_vec();
    let mut h = h.to_vec();
    t.sort_unstable();
    h.sort_unstable();
    (
        t.iter().map(|&i| samples[i].clone()).collect(),
        h.iter().map(|&i| samples[i].clone()).collect(),
    )
}

/// Indices of the `k` largest probabilities; ties go to the lower class.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Fraction of samples whose label is among the `k` most probable classes.
pub fn evaluate_topk(
    model: &CompositionalClassifier,
    samples: &[Sample],
    k: usize,
    mode: Mode<'_>,
) -> Result<f64> {
    if k == 0 || k > model.classes() {
        return Err(Error::InvalidParameter(format!(
            "k = {k} for {} classes",
            model.classes()
        )));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    let eff = model.effective_weights(&model.masks_for(mode)?)?;
    let hits = samples
        .par_iter()
        .map(|s| {
            Ok(usize::from(
                top_k(&model.forward_with(&eff, &s.input)?, k).contains(&s.label),
            ))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / samples.len() as f64)
}

fn check_samples(model: &CompositionalClassifier, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    for s in samples {
        if s.input.len() != model.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "sample of {} values, classifier expects {}",
                s.input.len(),
                model.input_dim()
            )));
        }
        if s.label >= model.classes() {
            return Err(Error::DimensionMismatch(format!(
                "label {} for {} classes",
                s.label,
                model.classes()
            )));
        }
    }
    Ok(())
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    idx.shuffle(&mut rng);
    idx
}

fn mean_entropy(model: &CompositionalClassifier) -> f64 {
    let layers: Vec<f64> = model
        .layers()
        .iter()
        .filter_map(|l| l.mask_logits().map(|m| (m.mean_entropy(), m.block_count())))
        .map(|(e, b)| e * b as f64)
        .collect();
    let blocks: usize = model
        .layers()
        .iter()
        .filter_map(|l| l.mask_logits().map(|m| m.block_count()))
        .sum();
    if blocks == 0 {
        0.0
    } else {
        layers.iter().sum::<f64>() / blocks as f64
    }
}

/// Freezes every maskable layer's logits into a bit mask installed on the
/// model.
pub fn freeze_all(
    model: &mut CompositionalClassifier,
    mode: FreezeMode,
) -> Result<Vec<(usize, BitMask)>> {
    let mut out = Vec::new();
    for i in model.maskable_layers() {
        let layer = &model.layers()[i];
        let logits = layer
            .mask_logits()
            .ok_or_else(|| Error::MissingMask(layer.name().to_string()))?;
        let mask = freeze(logits, model.patterns(), mode)?;
        model.set_frozen_mask(i, mask.clone())?;
        out.push((i, mask));
    }
    Ok(out)
}

fn holdout_accuracy(
    model: &CompositionalClassifier,
    val: &[Sample],
    mode: FreezeMode,
) -> Result<(Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let mut probe = model.clone();
    freeze_all(&mut probe, mode)?;
    let k5 = probe.classes().min(5);
    Ok((
        Some(evaluate_topk(&probe, val, 1, Mode::Hard)?),
        Some(evaluate_topk(&probe, val, k5, Mode::Hard)?),
    ))
}

/// Learns the mask logits of every maskable layer with the weights held
/// fixed, then freezes them. Every training sample is visited once per
/// epoch; a fresh noise draw is shared by all samples of a batch.
///
/// On a non-finite loss the run stops with [`Error::Diverged`]; the model
/// keeps the logits from the last finite step.
pub fn train_masks(
    model: &mut CompositionalClassifier,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_samples(model, train)?;
    let maskable = model.maskable_layers();
    if maskable.is_empty() {
        return Err(Error::MissingMask("no maskable layers".into()));
    }
    for &i in &maskable {
        if model.layers()[i].mask_logits().is_none() {
            return Err(Error::MissingMask(model.layers()[i].name().to_string()));
        }
    }
    let adamw = config.adamw();
    let mut states: Vec<AdamWState> = maskable
        .iter()
        .map(|&i| AdamWState::new(model.layers()[i].mask_logits().unwrap().logits().len()))
        .collect();
    let mut history = TrainHistory::default();
    let mut counter = 0u64;
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let tau = config.temperature_at(epoch);
        for &i in &maskable {
            model.layers_mut()[i]
                .mask_logits_mut()
                .unwrap()
                .set_temperature(tau)?;
        }
        let order = epoch_order(train.len(), config.seed, epoch);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let noise = model.draw_noise(config.seed, counter)?;
            counter += 1;
            let (loss, grads) = grads_wrt_logits(model, &batch, &noise)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            total += loss * batch.len() as f64;
            for ((&i, g), state) in maskable.iter().zip(&grads).zip(&mut states) {
                let logits = model.layers_mut()[i].mask_logits_mut().unwrap();
                state.step(logits.logits_mut(), g, lr, &adamw)?;
            }
        }
        let (top1, top5) = holdout_accuracy(model, val, config.freeze)?;
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            temperature: tau,
            mean_loss: total / train.len() as f64,
            top1,
            top5,
            mask_entropy: mean_entropy(model),
        });
    }
    let masks = freeze_all(model, config.freeze)?;
    Ok(TrainOutcome { history, masks })
}

/// Settings for ordinary dense training of weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for WeightTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 5,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Dense AdamW training of all weights and biases, producing the
/// "pretrained" model that mask learning starts from. Returns the mean
/// training loss per epoch.
pub fn train_weights(
    model: &mut CompositionalClassifier,
    train: &[Sample],
    config: &WeightTrainConfig,
) -> Result<Vec<f64>> {
    check_samples(model, train)?;
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidParameter(
            "epochs and batch_size must be positive".into(),
        ));
    }
    let adamw = AdamWConfig {
        weight_decay: config.weight_decay,
        ..Default::default()
    };
    let mut w_states: Vec<AdamWState> = model
        .layers()
        .iter()
        .map(|l| AdamWState::new(l.weights().matrix().as_slice().len()))
        .collect();
    let mut b_states: Vec<AdamWState> = model
        .layers()
        .iter()
        .map(|l| AdamWState::new(l.bias().len()))
        .collect();
    let dense = vec![None; model.depth()];
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(train.len(), config.seed, epoch);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = param_grads(model, &batch, &dense)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            total += loss * batch.len() as f64;
            let mut failure = None;
            model.update_parameters(|i, w, bias| {
                let r1 =
                    w_states[i].step(w, grads.weights[i].as_slice(), config.learning_rate, &adamw);
                let r2 = b_states[i].step(bias, &grads.bias[i], config.learning_rate, &adamw);
                if let Err(e) = r1.and(r2) {
                    failure.get_or_insert(e);
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
        }
        losses.push(total / train.len() as f64);
    }
    Ok(losses)
}
