//! Classification and segmentation objectives and the weighted total.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::{Error, LabelImage, Result, Tensor, IGNORE};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<F> {
    pub loss: F,
    pub grad: Vec<F>,
}

impl<F: Float> LossGrad<F> {
    pub fn grad_norm(&self) -> F {
        self.grad
            .iter()
            .fold(F::zero(), |acc, &g| acc + g * g)
            .sqrt()
    }
}

/// Multi-label soft margin loss over class probabilities `p` and binary
/// image-level labels `y`:
///
/// `L = -(1/C) Σ_c [y_c ln p_c + (1 - y_c) ln(1 - p_c)]`
///
/// The gradient is taken with respect to `p` and is zero wherever the clamp
/// is active.
pub fn classification_loss<F: Float>(p: &[F], y: &[bool]) -> Result<LossGrad<F>> {
    if p.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: y.len(),
            actual: p.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::InvalidParameter {
            name: "classes",
            reason: "at least one class is required",
        });
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "probabilities",
            reason: "must be finite",
        });
    }
    let eps = F::from(PROB_EPS).expect("epsilon is representable");
    let lo = eps;
    let hi = F::one() - eps;
    let inv_c = F::one() / F::from(p.len()).expect("class count fits");
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(p.len());
    for (&raw, &label) in p.iter().zip(y) {
        let clamped = raw.max(lo).min(hi);
        let active = raw >= lo && raw <= hi;
        let (term, d) = if label {
            (clamped.ln(), F::one() / clamped)
        } else {
            ((F::one() - clamped).ln(), -F::one() / (F::one() - clamped))
        };
        loss = loss - term * inv_c;
        grad.push(if active { -d * inv_c } else { F::zero() });
    }
    Ok(LossGrad { loss, grad })
}

/// Softmax cross-entropy of `[h, w, C]` logits (row-major, `classes` per
/// pixel) against a label map, averaged over non-ignored pixels. A target
/// made only of [`IGNORE`] gives zero loss and gradient.
pub fn segmentation_loss_values<F: Float>(
    logits: &[F],
    classes: usize,
    target: &LabelImage,
) -> Result<LossGrad<F>> {
    let pixels = target.height() * target.width();
    if classes == 0 || logits.len() != pixels * classes {
        return Err(Error::LengthMismatch {
            expected: pixels * classes,
            actual: logits.len(),
        });
    }
    target.validate(classes)?;
    let valid = target.labels().iter().filter(|&&l| l != IGNORE).count();
    let mut grad = vec![F::zero(); logits.len()];
    if valid == 0 {
        return Ok(LossGrad {
            loss: F::zero(),
            grad,
        });
    }
    let inv_n = F::one() / F::from(valid).expect("pixel count fits");
    let mut loss = F::zero();
    for (p, &label) in target.labels().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let z = &logits[p * classes..(p + 1) * classes];
        let max = z.iter().copied().fold(F::neg_infinity(), F::max);
        let sum = z.iter().fold(F::zero(), |acc, &v| acc + (v - max).exp());
        let log_norm = max + sum.ln();
        let t = usize::from(label);
        loss = loss + (log_norm - z[t]) * inv_n;
        let g = &mut grad[p * classes..(p + 1) * classes];
        for (c, (gc, &zc)) in g.iter_mut().zip(z).enumerate() {
            let prob = (zc - log_norm).exp();
            let onehot = if c == t { F::one() } else { F::zero() };
            *gc = (prob - onehot) * inv_n;
        }
    }
    Ok(LossGrad { loss, grad })
}

/// [`segmentation_loss_values`] on a `[h, w, C]` logit tensor, evaluated in
/// `f64`.
pub fn segmentation_loss(pred: &Tensor, target: &LabelImage) -> Result<LossGrad<f32>> {
    pred.expect_rank("segmentation logits", 3)?;
    let shape = pred.shape();
    if shape[0] != target.height() || shape[1] != target.width() {
        return Err(Error::shape(
            "segmentation logits",
            &[target.height(), target.width(), shape[2]],
            shape,
        ));
    }
    let logits: Vec<f64> = pred.data().iter().map(|&v| f64::from(v)).collect();
    let r = segmentation_loss_values(&logits, shape[2], target)?;
    Ok(LossGrad {
        loss: r.loss as f32,
        grad: r.grad.iter().map(|&g| g as f32).collect(),
    })
}

/// Weights of the segmentation, affinity and regularisation terms relative
/// to the classification loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub seg: f64,
    pub aff: f64,
    pub reg: f64,
}

impl LossWeights {
    pub fn new(seg: f64, aff: f64, reg: f64) -> Result<Self> {
        if [seg, aff, reg]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::InvalidParameter {
                name: "loss weights",
                reason: "must be finite and non-negative",
            });
        }
        Ok(Self { seg, aff, reg })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 0.1,
            aff: 0.1,
            reg: 0.01,
        }
    }
}

/// `L = L_cls + λ1 L_seg + λ2 L_aff + λ3 L_reg`. The regularisation term is
/// supplied from outside.
pub fn combine(cls: f64, seg: f64, aff: f64, reg: f64, w: &LossWeights) -> Result<f64> {
    if [cls, seg, aff, reg].iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "loss terms",
            reason: "must be finite",
        });
    }
    Ok(cls + w.seg * seg + w.aff * aff + w.reg * reg)
}
