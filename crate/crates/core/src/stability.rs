//! Lipschitz and prediction-stability certificates under the operator
//! ∞-norm (maximum absolute row sum).
//!
//! The bounds treat each layer as `x ↦ σ(W x + b)` and drop the biases from
//! every product. The certificates that scale with `‖x‖∞` bound the hidden
//! activations by `L^i ∏ ‖W‖ ‖x‖`, which holds when the layers below the
//! perturbed one map zero to zero (zero biases and `σ(0) = 0`).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{CompositionalClassifier, Mode};

/// Per-layer weight norms and the shared activation constant.
#[derive(Debug, Clone, PartialEq)]
pub struct NormProfile {
    pub norms: Vec<f64>,
    pub lipschitz: f64,
}

impl NormProfile {
    pub fn of(model: &CompositionalClassifier) -> Self {
        let norms = model
            .layers()
            .iter()
            .map(|l| l.weights().matrix().inf_norm())
            .collect();
        let lipschitz = model
            .layers()
            .iter()
            .map(|l| l.activation().lipschitz())
            .fold(1.0, f64::max);
        Self { norms, lipschitz }
    }

    pub fn depth(&self) -> usize {
        self.norms.len()
    }

    /// `L^d`.
    pub fn activation_factor(&self) -> f64 {
        self.lipschitz.powi(self.depth() as i32)
    }

    /// `∏ ‖W_i‖`.
    pub fn product(&self) -> f64 {
        self.norms.iter().product()
    }

    /// `∏_{i≠j} ‖W_i‖`.
    pub fn product_except(&self, j: usize) -> Result<f64> {
        self.check(j)?;
        Ok(self
            .norms
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != j)
            .map(|(_, n)| n)
            .product())
    }

    fn check(&self, j: usize) -> Result<()> {
        if j >= self.depth() {
            return Err(Error::InvalidLayer {
                index: j,
                depth: self.depth(),
            });
        }
        Ok(())
    }
}

/// `L^d ∏ ‖W_i‖∞`, an upper bound on the Lipschitz constant of the
/// classifier.
pub fn lipschitz_bound(model: &CompositionalClassifier) -> f64 {
    let p = NormProfile::of(model);
    p.activation_factor() * p.product()
}

/// Lipschitz bound after adding a perturbation of norm `delta_norm` to layer
/// `j` (zero-based): `L_f + L ‖ΔW‖ ∏_{i≠j} ‖W_i‖`.
pub fn perturbed_lipschitz_bound(
    model: &CompositionalClassifier,
    j: usize,
    delta_norm: f64,
) -> Result<f64> {
    let p = NormProfile::of(model);
    let rest = p.product_except(j)?;
    Ok(p.activation_factor() * p.product() + p.lipschitz * delta_norm * rest)
}

/// `ΔW = (B - 1) ⊙ W` and its norm, so that `W + ΔW = B ⊙ W`. `b` holds
/// zeros and ones and may have any shape matching `w`.
pub fn mask_to_perturbation(b: &Matrix, w: &Matrix) -> Result<(Matrix, f64)> {
    if b.shape() != w.shape() {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} for weights {:?}",
            b.shape(),
            w.shape()
        )));
    }
    if b.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidParameter(
            "mask entries must be 0 or 1".into(),
        ));
    }
    let data = b
        .as_slice()
        .iter()
        .zip(w.as_slice())
        // keep the exact value on kept entries so W + ΔW is B ⊙ W bitwise
        .map(|(&m, &x)| if m == 1.0 { 0.0 } else { -x })
        .collect();
    let delta = Matrix::from_vec(w.rows(), w.cols(), data)?;
    let norm = delta.inf_norm();
    Ok((delta, norm))
}

/// `(p(1) - p(2)) / 2` for the two largest probabilities: the smallest
/// ∞-norm shift of the probability vector that can change its argmax.
pub fn confidence(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "confidence needs at least 2 classes, got {}",
            probs.len()
        )));
    }
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > a {
            b = a;
            a = p;
        } else if p > b {
            b = p;
        }
    }
    Ok((a - b) / 2.0)
}

/// Which bound produced a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lemma {
    /// A specific perturbation `ΔW` of one layer.
    Perturbation,
    /// Any binary mask on one layer.
    AnyMask,
    /// Any binary mask on one layer followed by an additive update.
    MaskThenUpdate,
}

impl Lemma {
    /// Short tag used in reports.
    pub fn tag(&self) -> &'static str {
        match self {
            Lemma::Perturbation => "L4",
            Lemma::AnyMask => "L5",
            Lemma::MaskThenUpdate => "L6",
        }
    }
}

/// Bounds at or above this value can never certify: `γ ≤ 1/2`.
pub const VACUOUS_BOUND: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityCertificate {
    pub sample_id: usize,
    pub gamma: f64,
    pub bound: f64,
    pub lemma: Lemma,
    pub stable_guaranteed: bool,
    pub vacuous: bool,
}

impl StabilityCertificate {
    pub fn new(sample_id: usize, gamma: f64, bound: f64, lemma: Lemma) -> Self {
        Self {
            sample_id,
            gamma,
            bound,
            lemma,
            stable_guaranteed: gamma > bound,
            vacuous: bound >= VACUOUS_BOUND,
        }
    }

    pub const HEADER: &'static str = "id\tgamma\tbound\tlemma\tguaranteed\tvacuous";

    /// One tab-separated report line.
    pub fn record(&self) -> String {
        format!(
            "{}\t{:.9e}\t{:.9e}\t{}\t{}\t{}",
            self.sample_id,
            self.gamma,
            self.bound,
            self.lemma.tag(),
            self.stable_guaranteed as u8,
            self.vacuous as u8
        )
    }
}

fn input_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn gamma_of(model: &CompositionalClassifier, x: &[f64]) -> Result<f64> {
    confidence(&model.forward(x, Mode::Dense)?)
}

fn check_shape(model: &CompositionalClassifier, j: usize, m: &Matrix, what: &str) -> Result<()> {
    let w = model.layer(j)?.weights();
    let ok = m.rows() == w.rows() && (m.cols() == w.cols() || m.cols() == w.real_cols());
    if !ok {
        return Err(Error::DimensionMismatch(format!(
            "{what} {:?} for layer {j} weights {:?}",
            m.shape(),
            w.matrix().shape()
        )));
    }
    Ok(())
}

/// Certificate for the specific perturbation `delta` of layer `j`:
/// `L^d ‖ΔW‖ ‖x‖ ∏_{i≠j} ‖W_i‖`.
pub fn stability_margin(
    model: &CompositionalClassifier,
    x: &[f64],
    j: usize,
    delta: &Matrix,
) -> Result<StabilityCertificate> {
    check_shape(model, j, delta, "perturbation")?;
    let p = NormProfile::of(model);
    let bound = p.activation_factor() * delta.inf_norm() * input_norm(x) * p.product_except(j)?;
    Ok(StabilityCertificate::new(
        0,
        gamma_of(model, x)?,
        bound,
        Lemma::Perturbation,
    ))
}

/// Certificate covering every binary mask of layer `j`:
/// `L^d ‖x‖ ∏_i ‖W_i‖`.
pub fn masking_stability(
    model: &CompositionalClassifier,
    x: &[f64],
    j: usize,
) -> Result<StabilityCertificate> {
    let p = NormProfile::of(model);
    p.check(j)?;
    let bound = p.activation_factor() * input_norm(x) * p.product();
    Ok(StabilityCertificate::new(
        0,
        gamma_of(model, x)?,
        bound,
        Lemma::AnyMask,
    ))
}

/// Certificate covering every binary mask of layer `j` followed by the
/// update `U_j`: `L^d (‖W_j‖ + ‖U_j‖) ‖x‖ ∏_{i≠j} ‖W_i‖`.
pub fn update_masking_stability(
    model: &CompositionalClassifier,
    x: &[f64],
    j: usize,
    update: &Matrix,
) -> Result<StabilityCertificate> {
    check_shape(model, j, update, "update")?;
    let p = NormProfile::of(model);
    let bound = p.activation_factor()
        * (p.norms[j] + update.inf_norm())
        * input_norm(x)
        * p.product_except(j)?;
    Ok(StabilityCertificate::new(
        0,
        gamma_of(model, x)?,
        bound,
        Lemma::MaskThenUpdate,
    ))
}

/// What to certify a batch of samples against.
#[derive(Debug, Clone, Copy)]
pub enum CertifyRequest<'a> {
    Perturbation(&'a Matrix),
    AnyMask,
    MaskThenUpdate(&'a Matrix),
}

/// Certificates for many samples, numbered by position.
pub fn certify_batch(
    model: &CompositionalClassifier,
    inputs: &[Vec<f64>],
    j: usize,
    request: CertifyRequest<'_>,
) -> Result<Vec<StabilityCertificate>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(id, x)| {
            let mut c = match request {
                CertifyRequest::Perturbation(d) => stability_margin(model, x, j, d)?,
                CertifyRequest::AnyMask => masking_stability(model, x, j)?,
                CertifyRequest::MaskThenUpdate(u) => update_masking_stability(model, x, j, u)?,
            };
            c.sample_id = id;
            Ok(c)
        })
        .collect()
}
