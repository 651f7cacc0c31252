use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::conv::{kernels_to_weight_matrix, unfold_into, KernelStack, WeightMatrix};
use crate::error::{Error, Result};
use crate::mask_sampler::{
    assemble_soft, gs_soft_sample, sample_gumbel, GumbelNoise, MaskLogits, NoiseKey, SoftChoice,
};
use crate::matrix::{axpy, Matrix};
use crate::nm_patterns::{enumerate_patterns, validate_mask, BitMask, NmConfig, PatternMatrix};

/// Elementwise activation of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    /// Lipschitz constant of the activation.
    pub fn lipschitz(&self) -> f64 {
        1.0
    }

    #[inline]
    pub(crate) fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    #[inline]
    pub(crate) fn derivative(&self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Geometry of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Same-padded stride-1 convolution over a `channels x height x width`
    /// input.
    Conv {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerKind {
    pub fn in_dim(&self) -> usize {
        match *self {
            LayerKind::Conv {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
            LayerKind::Linear { inputs, .. } => inputs,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerKind::Conv {
                out_channels,
                height,
                width,
                ..
            } => out_channels * height * width,
            LayerKind::Linear { outputs, .. } => outputs,
        }
    }

    /// Columns of the (unaugmented) weight matrix.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => in_channels * kernel_h * kernel_w,
            LayerKind::Linear { inputs, .. } => inputs,
        }
    }

    pub fn weight_rows(&self) -> usize {
        match *self {
            LayerKind::Conv { out_channels, .. } => out_channels,
            LayerKind::Linear { outputs, .. } => outputs,
        }
    }
}

/// One affine-plus-activation stage `σ(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    name: String,
    kind: LayerKind,
    weights: WeightMatrix,
    bias: Vec<f64>,
    activation: Activation,
    maskable: bool,
    logits: Option<MaskLogits>,
    frozen: Option<BitMask>,
}

impl Layer {
    pub fn conv(
        name: impl Into<String>,
        kernels: &KernelStack,
        bias: Vec<f64>,
        input_hw: (usize, usize),
        activation: Activation,
    ) -> Result<Self> {
        let (kernel_h, kernel_w) = kernels.kernel_dims();
        let kind = LayerKind::Conv {
            in_channels: kernels.c_in(),
            out_channels: kernels.c_out(),
            height: input_hw.0,
            width: input_hw.1,
            kernel_h,
            kernel_w,
        };
        Self::from_parts(
            name,
            kind,
            kernels_to_weight_matrix(kernels, false),
            bias,
            activation,
        )
    }

    pub fn linear(
        name: impl Into<String>,
        weights: Matrix,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let kind = LayerKind::Linear {
            inputs: weights.cols(),
            outputs: weights.rows(),
        };
        Self::from_parts(name, kind, WeightMatrix::dense(weights), bias, activation)
    }

    pub fn from_parts(
        name: impl Into<String>,
        kind: LayerKind,
        weights: WeightMatrix,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if let LayerKind::Conv {
            kernel_h, kernel_w, ..
        } = kind
        {
            if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
                return Err(Error::EvenKernel {
                    height: kernel_h,
                    width: kernel_w,
                });
            }
        }
        if weights.rows() != kind.weight_rows() || weights.real_cols() != kind.fan_in() {
            return Err(Error::DimensionMismatch(format!(
                "weights {:?} ({} real) for layer {:?}",
                weights.matrix().shape(),
                weights.real_cols(),
                kind
            )));
        }
        if bias.len() != kind.weight_rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} biases for {} rows",
                bias.len(),
                kind.weight_rows()
            )));
        }
        Ok(Self {
            name: name.into(),
            kind,
            weights,
            bias,
            activation,
            maskable: false,
            logits: None,
            frozen: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn weights(&self) -> &WeightMatrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn is_maskable(&self) -> bool {
        self.maskable
    }

    pub fn mask_logits(&self) -> Option<&MaskLogits> {
        self.logits.as_ref()
    }

    pub fn mask_logits_mut(&mut self) -> Option<&mut MaskLogits> {
        self.logits.as_mut()
    }

    pub fn frozen_mask(&self) -> Option<&BitMask> {
        self.frozen.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.kind.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.kind.out_dim()
    }

    /// Kernel stack of a convolutional layer.
    pub fn kernels(&self) -> Option<KernelStack> {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some(
                KernelStack::new(
                    out_channels,
                    in_channels,
                    kernel_h,
                    kernel_w,
                    self.weights.unaugmented().into_vec(),
                )
                .expect("layer shape is consistent"),
            ),
            LayerKind::Linear { .. } => None,
        }
    }

    fn align(&mut self, config: NmConfig) {
        let cols = config.aligned_width(self.weights.real_cols());
        if cols == self.weights.cols() {
            return;
        }
        let real = self.weights.real_cols();
        let m = Matrix::from_fn(self.weights.rows(), cols, |r, c| {
            if c < real {
                self.weights.matrix()[(r, c)]
            } else {
                0.0
            }
        });
        self.weights = WeightMatrix::new(m, real).expect("structural columns are zero");
    }

    /// `W ⊙ M` for an optional mask over the augmented weight matrix.
    fn effective(&self, mask: Option<&Matrix>) -> Result<Matrix> {
        match mask {
            Some(m) => self.weights.matrix().hadamard(m),
            None => Ok(self.weights.matrix().clone()),
        }
    }

    /// Forward pass of one sample with explicit effective weights, returning
    /// the pre-activation and filling `unfolded` for convolutions.
    pub(crate) fn pre_activation(
        &self,
        eff: &Matrix,
        input: &[f64],
        unfolded: Option<&mut Matrix>,
    ) -> Vec<f64> {
        let k = self.weights.real_cols();
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                height,
                width,
                kernel_h,
                kernel_w,
            } => {
                let l = height * width;
                let mut local;
                let u = match unfolded {
                    Some(u) => u,
                    None => {
                        local = Matrix::zeros(k, l);
                        &mut local
                    }
                };
                if u.shape() != (k, l) {
                    *u = Matrix::zeros(k, l);
                }
                unfold_into(input, (in_channels, height, width), (kernel_h, kernel_w), u);
                let mut out = vec![0.0; out_channels * l];
                for (o, row) in out.chunks_mut(l).enumerate() {
                    row.fill(self.bias[o]);
                    for (t, &w) in eff.row(o)[..k].iter().enumerate() {
                        if w != 0.0 {
                            axpy(row, w, u.row(t));
                        }
                    }
                }
                out
            }
            LayerKind::Linear { outputs, .. } => (0..outputs)
                .map(|o| {
                    self.bias[o]
                        + eff.row(o)[..k]
                            .iter()
                            .zip(input)
                            .map(|(w, x)| w * x)
                            .sum::<f64>()
                })
                .collect(),
        }
    }
}

/// How masked layers are treated in a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Ignore masks entirely.
    Dense,
    /// Relaxed masks from the Gumbel-Softmax sample of each maskable layer's
    /// logits under the given noise (one entry per maskable layer, in layer
    /// order).
    Soft(&'a [GumbelNoise]),
    /// Frozen bit masks.
    Hard,
}

/// `softmax ∘ f_d ∘ … ∘ f_1` with `f_i(x) = σ(W_i x + b_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionalClassifier {
    input_dim: usize,
    layers: Vec<Layer>,
    patterns: PatternMatrix,
}

impl CompositionalClassifier {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        Self::with_config(input_dim, layers, NmConfig::two_four())
    }

    pub fn with_config(input_dim: usize, layers: Vec<Layer>, config: NmConfig) -> Result<Self> {
        let mut dim = input_dim;
        for l in &layers {
            if l.in_dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} expects {} inputs, previous stage yields {dim}",
                    l.name,
                    l.in_dim()
                )));
            }
            dim = l.out_dim();
        }
        if dim == 0 {
            return Err(Error::EmptyInput("classifier with no classes".into()));
        }
        Ok(Self {
            input_dim,
            layers,
            patterns: enumerate_patterns(config),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Layer::out_dim)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Result<&Layer> {
        self.layers.get(index).ok_or(Error::InvalidLayer {
            index,
            depth: self.layers.len(),
        })
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn config(&self) -> NmConfig {
        self.patterns.config()
    }

    pub fn patterns(&self) -> &PatternMatrix {
        &self.patterns
    }

    /// Indices of the maskable layers.
    pub fn maskable_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].maskable)
            .collect()
    }

    /// Flags layer `index` maskable: pads its weights to the block width
    /// and attaches Glorot-initialised logits.
    pub fn enable_masking(&mut self, index: usize, temperature: f64, seed: u64) -> Result<()> {
        let depth = self.layers.len();
        let config = self.config();
        let layer = self
            .layers
            .get_mut(index)
            .ok_or(Error::InvalidLayer { index, depth })?;
        layer.align(config);
        layer.logits = Some(MaskLogits::glorot(
            index as u32,
            layer.weights.rows(),
            layer.weights.real_cols(),
            &self.patterns,
            temperature,
            seed,
        )?);
        layer.maskable = true;
        Ok(())
    }

    /// Flags every convolutional layer maskable.
    pub fn enable_conv_masking(&mut self, temperature: f64, seed: u64) -> Result<()> {
        for i in 0..self.layers.len() {
            if matches!(self.layers[i].kind, LayerKind::Conv { .. }) {
                self.enable_masking(i, temperature, seed)?;
            }
        }
        Ok(())
    }

    /// Overwrites the logits of maskable layer `index`.
    pub fn set_mask_logits(&mut self, index: usize, values: &[f64]) -> Result<()> {
        let depth = self.layers.len();
        let layer = self
            .layers
            .get_mut(index)
            .ok_or(Error::InvalidLayer { index, depth })?;
        let name = layer.name.clone();
        let logits = layer.logits.as_mut().ok_or(Error::MissingMask(name))?;
        if logits.logits().len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} logits for a layer holding {}",
                values.len(),
                logits.logits().len()
            )));
        }
        logits.logits_mut().copy_from_slice(values);
        Ok(())
    }

    /// Sets the relaxation temperature of every maskable layer.
    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        for l in &mut self.layers {
            if let Some(logits) = l.logits.as_mut() {
                logits.set_temperature(temperature)?;
            }
        }
        Ok(())
    }

    /// Installs a frozen mask on layer `index`, marking it maskable.
    pub fn set_frozen_mask(&mut self, index: usize, mask: BitMask) -> Result<()> {
        let depth = self.layers.len();
        let config = self.config();
        let layer = self
            .layers
            .get_mut(index)
            .ok_or(Error::InvalidLayer { index, depth })?;
        layer.align(config);
        if mask.shape() != layer.weights.matrix().shape() || mask.config() != config {
            return Err(Error::DimensionMismatch(format!(
                "mask {:?} for layer {} weights {:?}",
                mask.shape(),
                layer.name,
                layer.weights.matrix().shape()
            )));
        }
        validate_mask(&mask)?;
        layer.frozen = Some(mask);
        layer.maskable = true;
        Ok(())
    }

    pub fn clear_frozen_masks(&mut self) {
        for l in &mut self.layers {
            l.frozen = None;
        }
    }

    /// Copy of the classifier with layer `index`'s weight matrix replaced.
    /// The replacement may be unaugmented or match the augmented width.
    pub fn with_weights(&self, index: usize, weights: &Matrix) -> Result<Self> {
        let mut out = self.clone();
        let depth = out.layers.len();
        let layer = out
            .layers
            .get_mut(index)
            .ok_or(Error::InvalidLayer { index, depth })?;
        let real = layer.weights.real_cols();
        let cols = layer.weights.cols();
        if weights.rows() != layer.weights.rows()
            || (weights.cols() != real && weights.cols() != cols)
        {
            return Err(Error::DimensionMismatch(format!(
                "replacement {:?} for weights {:?}",
                weights.shape(),
                layer.weights.matrix().shape()
            )));
        }
        let m = Matrix::from_fn(weights.rows(), cols, |r, c| {
            if c < real {
                weights[(r, c)]
            } else {
                0.0
            }
        });
        layer.weights = WeightMatrix::new(m, real)?;
        Ok(out)
    }

    /// Fresh noise for every maskable layer at draw `counter`.
    pub fn draw_noise(&self, seed: u64, counter: u64) -> Result<Vec<GumbelNoise>> {
        self.maskable_layers()
            .into_iter()
            .map(|i| {
                let logits = self.layers[i]
                    .logits
                    .as_ref()
                    .ok_or_else(|| Error::MissingMask(self.layers[i].name.clone()))?;
                sample_gumbel(
                    logits.block_count(),
                    logits.pattern_count(),
                    NoiseKey::new(seed, logits.layer_id(), counter),
                )
            })
            .collect()
    }

    /// Soft choices of every maskable layer under `noise`.
    pub(crate) fn soft_choices(&self, noise: &[GumbelNoise]) -> Result<Vec<SoftChoice>> {
        let maskable = self.maskable_layers();
        if noise.len() != maskable.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} noise sets for {} maskable layers",
                noise.len(),
                maskable.len()
            )));
        }
        maskable
            .iter()
            .zip(noise)
            .map(|(&i, g)| {
                let logits = self.layers[i]
                    .logits
                    .as_ref()
                    .ok_or_else(|| Error::MissingMask(self.layers[i].name.clone()))?;
                gs_soft_sample(logits, g)
            })
            .collect()
    }

    /// Per-layer mask matrices for `mode` (`None` where a layer runs dense).
    pub fn masks_for(&self, mode: Mode<'_>) -> Result<Vec<Option<Matrix>>> {
        let mut out = vec![None; self.layers.len()];
        match mode {
            Mode::Dense => {}
            Mode::Soft(noise) => {
                let choices = self.soft_choices(noise)?;
                for (i, z) in self.maskable_layers().into_iter().zip(&choices) {
                    let (r, c) = self.layers[i].weights.matrix().shape();
                    out[i] = Some(assemble_soft(z, &self.patterns, r, c)?);
                }
            }
            Mode::Hard => {
                for i in self.maskable_layers() {
                    let layer = &self.layers[i];
                    let frozen = layer
                        .frozen
                        .as_ref()
                        .ok_or_else(|| Error::MissingMask(layer.name.clone()))?;
                    out[i] = Some(frozen.to_matrix());
                }
            }
        }
        Ok(out)
    }

    /// Effective weight matrices `W ⊙ M` for explicit masks.
    pub fn effective_weights(&self, masks: &[Option<Matrix>]) -> Result<Vec<Matrix>> {
        if masks.len() != self.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} masks for {} layers",
                masks.len(),
                self.layers.len()
            )));
        }
        self.layers
            .iter()
            .zip(masks)
            .map(|(l, m)| l.effective(m.as_ref()))
            .collect()
    }

    /// Class probabilities of one input.
    pub fn forward(&self, x: &[f64], mode: Mode<'_>) -> Result<Vec<f64>> {
        let eff = self.effective_weights(&self.masks_for(mode)?)?;
        self.forward_with(&eff, x)
    }

    /// Class probabilities with explicit per-layer masks.
    pub fn forward_masked(&self, x: &[f64], masks: &[Option<Matrix>]) -> Result<Vec<f64>> {
        let eff = self.effective_weights(masks)?;
        self.forward_with(&eff, x)
    }

    /// Class probabilities with precomputed effective weights.
    pub fn forward_with(&self, eff: &[Matrix], x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits_with(eff, x)?))
    }

    /// Output of the last affine stage before the softmax.
    pub fn logits_with(&self, eff: &[Matrix], x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "input of {} values, classifier expects {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut a = x.to_vec();
        for (layer, w) in self.layers.iter().zip(eff) {
            let mut z = layer.pre_activation(w, &a, None);
            for v in &mut z {
                *v = layer.activation.apply(*v);
            }
            a = z;
        }
        Ok(a)
    }

    /// SHA-256 over every weight and bias, little-endian `f64`, in layer
    /// order. Masks and logits are excluded.
    pub fn weights_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.weights.unaugmented().as_slice() {
                h.update(v.to_le_bytes());
            }
            for v in &l.bias {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Replaces the weights and biases of every layer (used by weight
    /// training).
    pub(crate) fn update_parameters(&mut self, mut f: impl FnMut(usize, &mut [f64], &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let real = l.weights.real_cols();
            let mut m = l.weights.matrix().clone();
            f(i, m.as_mut_slice(), &mut l.bias);
            for r in 0..m.rows() {
                for v in &mut m.row_mut(r)[real..] {
                    *v = 0.0;
                }
            }
            l.weights = WeightMatrix::new(m, real).expect("structural columns reset");
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

/// He-uniform initialised layers for quick experiments.
pub fn init_conv(
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    input_hw: (usize, usize),
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> Result<Layer> {
    let fan_in = (c_in * kernel * kernel) as f64;
    let limit = (6.0 / fan_in).sqrt();
    let dist = Uniform::new(-limit, limit).expect("finite bounds");
    let taps = (0..c_out * c_in * kernel * kernel)
        .map(|_| dist.sample(rng))
        .collect();
    let kernels = KernelStack::new(c_out, c_in, kernel, kernel, taps)?;
    Layer::conv(name, &kernels, vec![0.0; c_out], input_hw, activation)
}

pub fn init_linear(
    name: &str,
    inputs: usize,
    outputs: usize,
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> Result<Layer> {
    let limit = (6.0 / (inputs + outputs) as f64).sqrt();
    let dist = Uniform::new(-limit, limit).expect("finite bounds");
    let w = Matrix::from_fn(outputs, inputs, |_, _| dist.sample(rng));
    Layer::linear(name, w, vec![0.0; outputs], activation)
}

/// A conv-conv-linear classifier over single-channel `side x side` images.
pub fn small_convnet(
    side: usize,
    channels: (usize, usize),
    classes: usize,
    seed: u64,
) -> Result<CompositionalClassifier> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = (side, side);
    let layers = vec![
        init_conv("conv0", 1, channels.0, 3, hw, Activation::Relu, &mut rng)?,
        init_conv(
            "conv1",
            channels.0,
            channels.1,
            3,
            hw,
            Activation::Relu,
            &mut rng,
        )?,
        init_linear(
            "head",
            channels.1 * side * side,
            classes,
            Activation::Identity,
            &mut rng,
        )?,
    ];
    CompositionalClassifier::new(side * side, layers)
}
