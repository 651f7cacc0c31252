use crate::conv::fold_add;
use crate::error::{Error, Result};
use crate::mask_sampler::{assemble_soft_backward, gs_soft_backward, GumbelNoise};
use crate::matrix::{axpy, Matrix};

use super::classifier::{softmax, CompositionalClassifier, LayerKind, Mode};

/// Smallest probability fed to the logarithm in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// One labelled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: usize,
}

/// `-log max(p[label], 1e-12)`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::DimensionMismatch(format!("label {label} for {} classes", probs.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Mean cross-entropy of a batch under `mode`.
pub fn batch_loss(
    model: &CompositionalClassifier,
    batch: &[Sample],
    mode: Mode<'_>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let eff = model.effective_weights(&model.masks_for(mode)?)?;
    let mut total = 0.0;
    for s in batch {
        total += cross_entropy(&model.forward_with(&eff, &s.input)?, s.label)?;
    }
    Ok(total / batch.len() as f64)
}

struct Trace {
    // input to each layer
    inputs: Vec<Vec<f64>>,
    // unfolded input of conv layers
    unfolded: Vec<Option<Matrix>>,
    pre: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

fn trace(model: &CompositionalClassifier, eff: &[Matrix], x: &[f64]) -> Result<Trace> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "input of {} values, classifier expects {}",
            x.len(),
            model.input_dim()
        )));
    }
    let depth = model.depth();
    let mut t = Trace {
        inputs: Vec::with_capacity(depth),
        unfolded: Vec::with_capacity(depth),
        pre: Vec::with_capacity(depth),
        probs: Vec::new(),
    };
    let mut a = x.to_vec();
    for (layer, w) in model.layers().iter().zip(eff) {
        let mut u = match layer.kind() {
            LayerKind::Conv { .. } => Some(Matrix::zeros(0, 0)),
            LayerKind::Linear { .. } => None,
        };
        let z = layer.pre_activation(w, &a, u.as_mut());
        let next = z.iter().map(|&v| layer.activation().apply(v)).collect();
        t.inputs.push(std::mem::replace(&mut a, next));
        t.unfolded.push(u);
        t.pre.push(z);
    }
    t.probs = softmax(&a);
    Ok(t)
}

/// Gradients of a loss with respect to the effective weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    /// Same shape as each layer's (augmented) weight matrix.
    pub weights: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
}

impl ParamGrads {
    fn zeros(model: &CompositionalClassifier) -> Self {
        Self {
            weights: model
                .layers()
                .iter()
                .map(|l| Matrix::zeros(l.weights().rows(), l.weights().cols()))
                .collect(),
            bias: model
                .layers()
                .iter()
                .map(|l| vec![0.0; l.bias().len()])
                .collect(),
        }
    }
}

/// Reverse pass of one sample, accumulating `scale * dL/dW_eff` and
/// `scale * dL/db` for the cross-entropy loss. Returns the sample's loss.
fn accumulate(
    model: &CompositionalClassifier,
    eff: &[Matrix],
    sample: &Sample,
    scale: f64,
    grads: &mut ParamGrads,
) -> Result<f64> {
    let t = trace(model, eff, &sample.input)?;
    let loss = cross_entropy(&t.probs, sample.label)?;
    let mut delta = t.probs.clone();
    delta[sample.label] -= 1.0;
    for v in &mut delta {
        *v *= scale;
    }
    for i in (0..model.depth()).rev() {
        let layer = &model.layers()[i];
        let act = layer.activation();
        for (d, &z) in delta.iter_mut().zip(&t.pre[i]) {
            *d *= act.derivative(z);
        }
        let w = &eff[i];
        let k = layer.weights().real_cols();
        let gw = &mut grads.weights[i];
        let need_input = i > 0;
        match layer.kind() {
            LayerKind::Conv {
                in_channels,
                out_channels,
                height,
                width,
                kernel_h,
                kernel_w,
            } => {
                let l = height * width;
                let u = t.unfolded[i].as_ref().expect("conv layers record taps");
                let mut du = need_input.then(|| Matrix::zeros(k, l));
                for o in 0..out_channels {
                    let dz = &delta[o * l..(o + 1) * l];
                    grads.bias[i][o] += dz.iter().sum::<f64>();
                    let grow = gw.row_mut(o);
                    for tap in 0..k {
                        grow[tap] += u.row(tap).iter().zip(dz).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(du) = du.as_mut() {
                        for (tap, &wv) in w.row(o)[..k].iter().enumerate() {
                            if wv != 0.0 {
                                axpy(du.row_mut(tap), wv, dz);
                            }
                        }
                    }
                }
                if let Some(du) = du {
                    let mut da = vec![0.0; in_channels * l];
                    fold_add(
                        &du,
                        (in_channels, height, width),
                        (kernel_h, kernel_w),
                        &mut da,
                    );
                    delta = da;
                }
            }
            LayerKind::Linear { inputs, outputs } => {
                let a = &t.inputs[i];
                let mut da = vec![0.0; if need_input { inputs } else { 0 }];
                for o in 0..outputs {
                    let dz = delta[o];
                    grads.bias[i][o] += dz;
                    if dz == 0.0 {
                        continue;
                    }
                    axpy(&mut gw.row_mut(o)[..k], dz, a);
                    if need_input {
                        axpy(&mut da, dz, &w.row(o)[..k]);
                    }
                }
                delta = da;
            }
        }
    }
    Ok(loss)
}

/// Mean loss of a batch and its gradient with respect to every layer's
/// effective weights and biases.
pub fn param_grads(
    model: &CompositionalClassifier,
    batch: &[Sample],
    masks: &[Option<Matrix>],
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let eff = model.effective_weights(masks)?;
    let mut grads = ParamGrads::zeros(model);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        loss += accumulate(model, &eff, s, scale, &mut grads)?;
    }
    Ok((loss * scale, grads))
}

/// Mean soft-mode loss of a batch and `dL/dlogits` for each maskable layer
/// (in layer order), with one noise draw shared across the batch.
pub fn grads_wrt_logits(
    model: &CompositionalClassifier,
    batch: &[Sample],
    noise: &[GumbelNoise],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let choices = model.soft_choices(noise)?;
    let masks = model.masks_for(Mode::Soft(noise))?;
    let (loss, grads) = param_grads(model, batch, &masks)?;
    let out = model
        .maskable_layers()
        .into_iter()
        .zip(&choices)
        .map(|(i, z)| {
            let layer = &model.layers()[i];
            let gm = grads.weights[i].hadamard(layer.weights().matrix())?;
            let gz = assemble_soft_backward(&gm, model.patterns());
            let tau = layer
                .mask_logits()
                .ok_or_else(|| Error::MissingMask(layer.name().to_string()))?
                .temperature();
            Ok(gs_soft_backward(z, &gz, tau))
        })
        .collect::<Result<_>>()?;
    Ok((loss, out))
}
