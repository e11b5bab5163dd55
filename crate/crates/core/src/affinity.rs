//! Affinity supervision and random-walk propagation.
//!
//! A pseudo label map is turned into ternary pairwise labels restricted to a
//! square window, the affinity logits are scored against them, and the
//! logits are turned into a row-stochastic transition matrix used to
//! propagate activation maps.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::cam::ActivationMap;
use crate::{Error, LabelImage, Result, Tensor, IGNORE};

/// Dense `n × n` matrix of pairwise affinity logits over flattened pixels.
///
/// Which entries are supervised is carried separately by an
/// [`AffinityLabel`].
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    size: usize,
    logits: Vec<f32>,
}

impl AffinityMatrix {
    pub fn new(size: usize, logits: Vec<f32>) -> Result<Self> {
        let t = Tensor::new(vec![size, size], logits)?;
        Self::from_tensor(t)
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        t.expect_rank("affinity matrix", 2)?;
        let n = t.shape()[0];
        if t.shape()[1] != n {
            return Err(Error::shape("affinity matrix", &[n, n], t.shape()));
        }
        let (_, logits) = t.into_parts();
        Ok(Self { size: n, logits })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size], self.logits.clone())
            .expect("affinity logits are finite")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn get(&self, p: usize, q: usize) -> f32 {
        self.logits[p * self.size + q]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Negative,
    Positive,
    Ignored,
}

impl PairLabel {
    /// Numeric code used in tensor form: positive 1, negative 0, ignored 255.
    pub fn code(self) -> u8 {
        match self {
            PairLabel::Negative => 0,
            PairLabel::Positive => 1,
            PairLabel::Ignored => IGNORE,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PairLabel::Negative),
            1 => Some(PairLabel::Positive),
            IGNORE => Some(PairLabel::Ignored),
            _ => None,
        }
    }
}

/// Ternary labels over all `hw × hw` pixel pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffinityLabel {
    size: usize,
    radius: Option<usize>,
    labels: Vec<PairLabel>,
}

impl AffinityLabel {
    /// Reads the tensor encoding (1 positive, 0 negative, 255 ignored).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        t.expect_rank("affinity label", 2)?;
        let n = t.shape()[0];
        if t.shape()[1] != n {
            return Err(Error::shape("affinity label", &[n, n], t.shape()));
        }
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                let code = v as u8;
                if f32::from(code) != v {
                    return None;
                }
                PairLabel::from_code(code)
            })
            .collect::<Option<Vec<_>>>()
            .ok_or(Error::InvalidParameter {
                name: "affinity label",
                reason: "entries must be 0, 1 or 255",
            })?;
        Ok(Self {
            size: n,
            radius: None,
            labels,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.labels.iter().map(|l| f32::from(l.code())).collect();
        Tensor::new(vec![self.size, self.size], data).expect("codes are finite")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Window radius the labels were derived with, if known.
    pub fn radius(&self) -> Option<usize> {
        self.radius
    }

    pub fn get(&self, p: usize, q: usize) -> PairLabel {
        self.labels[p * self.size + q]
    }

    pub fn labels(&self) -> &[PairLabel] {
        &self.labels
    }

    pub fn count(&self, kind: PairLabel) -> usize {
        self.labels.iter().filter(|&&l| l == kind).count()
    }
}

/// Derives pairwise labels from a pseudo label map.
///
/// The map is first resampled to `target_h × target_w` by nearest
/// neighbour. A pair is ignored when the pixels are more than `radius` apart
/// in Chebyshev distance or either pixel is [`IGNORE`]; otherwise it is
/// positive for equal labels and negative for different ones.
pub fn derive_affinity_label(
    yp: &LabelImage,
    radius: usize,
    target_h: usize,
    target_w: usize,
) -> Result<AffinityLabel> {
    if radius == 0 {
        return Err(Error::InvalidParameter {
            name: "radius",
            reason: "window radius must be at least 1",
        });
    }
    let grid = yp.downsample_nearest(target_h, target_w)?;
    let n = target_h * target_w;
    let mut labels = vec![PairLabel::Ignored; n * n];
    for p in 0..n {
        let (pr, pc) = (p / target_w, p % target_w);
        let lp = grid.labels()[p];
        if lp == IGNORE {
            continue;
        }
        let r0 = pr.saturating_sub(radius);
        let r1 = (pr + radius).min(target_h - 1);
        let c0 = pc.saturating_sub(radius);
        let c1 = (pc + radius).min(target_w - 1);
        for qr in r0..=r1 {
            for qc in c0..=c1 {
                let q = qr * target_w + qc;
                let lq = grid.labels()[q];
                labels[p * n + q] = if lq == IGNORE {
                    PairLabel::Ignored
                } else if lq == lp {
                    PairLabel::Positive
                } else {
                    PairLabel::Negative
                };
            }
        }
    }
    Ok(AffinityLabel {
        size: n,
        radius: Some(radius),
        labels,
    })
}

/// Loss value and gradient with respect to every logit.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityLoss<F> {
    pub loss: F,
    pub grad: Vec<F>,
    pub positives: usize,
    pub negatives: usize,
}

impl<F> AffinityLoss<F> {
    /// True when no pair was supervised; the loss and gradient are then zero.
    pub fn is_degenerate(&self) -> bool {
        self.positives == 0 && self.negatives == 0
    }
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Affinity loss on raw logits in row-major `n × n` order:
///
/// `L = mean_{R+} (1 - σ(A)) + mean_{R-} σ(A)`
///
/// with the exact gradient `-σ'/N+` on positives, `σ'/N-` on negatives and
/// zero on ignored pairs. An empty positive or negative set contributes
/// nothing.
pub fn affinity_loss_values<F: Float>(
    logits: &[F],
    labels: &AffinityLabel,
) -> Result<AffinityLoss<F>> {
    if logits.len() != labels.labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.labels.len(),
            actual: logits.len(),
        });
    }
    let positives = labels.count(PairLabel::Positive);
    let negatives = labels.count(PairLabel::Negative);
    let inv = |n: usize| {
        if n == 0 {
            F::zero()
        } else {
            F::one() / F::from(n).expect("count fits in a float")
        }
    };
    let (inv_pos, inv_neg) = (inv(positives), inv(negatives));
    let mut pos_sum = F::zero();
    let mut neg_sum = F::zero();
    let mut grad = vec![F::zero(); logits.len()];
    for ((&a, &label), g) in logits.iter().zip(&labels.labels).zip(grad.iter_mut()) {
        match label {
            PairLabel::Positive => {
                let s = sigmoid(a);
                pos_sum = pos_sum + sigmoid(-a);
                *g = -(s * (F::one() - s)) * inv_pos;
            }
            PairLabel::Negative => {
                let s = sigmoid(a);
                neg_sum = neg_sum + s;
                *g = s * (F::one() - s) * inv_neg;
            }
            PairLabel::Ignored => {}
        }
    }
    Ok(AffinityLoss {
        loss: pos_sum * inv_pos + neg_sum * inv_neg,
        grad,
        positives,
        negatives,
    })
}

/// [`affinity_loss_values`] on an [`AffinityMatrix`], evaluated in `f64`.
pub fn affinity_loss(a: &AffinityMatrix, labels: &AffinityLabel) -> Result<AffinityLoss<f32>> {
    if a.size != labels.size {
        return Err(Error::shape(
            "affinity matrix",
            &[labels.size, labels.size],
            &[a.size, a.size],
        ));
    }
    let logits: Vec<f64> = a.logits.iter().map(|&v| f64::from(v)).collect();
    let r = affinity_loss_values(&logits, labels)?;
    Ok(AffinityLoss {
        loss: r.loss as f32,
        grad: r.grad.iter().map(|&g| g as f32).collect(),
        positives: r.positives,
        negatives: r.negatives,
    })
}

/// Row-stochastic random-walk transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    size: usize,
    alpha: f32,
    data: Vec<f32>,
}

/// Rows whose powered mass falls below this are replaced by self-transition.
pub const ZERO_ROW_MASS: f64 = 1e-12;

impl TransitionMatrix {
    pub fn identity(size: usize) -> Self {
        let mut data = vec![0.0; size * size];
        for i in 0..size {
            data[i * size + i] = 1.0;
        }
        Self {
            size,
            alpha: 1.0,
            data,
        }
    }

    /// Accepts an explicit matrix whose rows are non-negative and sum to one
    /// within `1e-6`.
    pub fn from_rows(size: usize, data: Vec<f32>) -> Result<Self> {
        let t = Tensor::new(vec![size, size], data)?;
        let (_, data) = t.into_parts();
        for row in data.chunks(size) {
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidParameter {
                    name: "transition matrix",
                    reason: "rows must be non-negative and sum to 1",
                });
            }
        }
        Ok(Self {
            size,
            alpha: 1.0,
            data,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, p: usize, q: usize) -> f32 {
        self.data[p * self.size + q]
    }

    pub fn row(&self, p: usize) -> &[f32] {
        &self.data[p * self.size..(p + 1) * self.size]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size], self.data.clone())
            .expect("transition entries are finite")
    }
}

/// `T = D⁻¹ σ(A)^α` with `D` the diagonal of row sums; the power is taken
/// elementwise after the sigmoid.
pub fn transition_matrix(a: &AffinityMatrix, alpha: f32) -> Result<TransitionMatrix> {
    if !(alpha >= 1.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            reason: "power factor must be finite and at least 1",
        });
    }
    let n = a.size;
    let alpha64 = f64::from(alpha);
    let mut data = Vec::with_capacity(n * n);
    let mut row = vec![0.0f64; n];
    for p in 0..n {
        for (r, &v) in row.iter_mut().zip(&a.logits[p * n..(p + 1) * n]) {
            *r = sigmoid(f64::from(v)).powf(alpha64);
        }
        let sum: f64 = row.iter().sum();
        if sum < ZERO_ROW_MASS {
            data.extend((0..n).map(|q| if q == p { 1.0 } else { 0.0 }));
        } else {
            data.extend(row.iter().map(|&v| (v / sum) as f32));
        }
    }
    Ok(TransitionMatrix {
        size: n,
        alpha,
        data,
    })
}

/// One random-walk step: every class channel is flattened and left-multiplied
/// by `T`.
pub fn propagate(map: &ActivationMap, t: &TransitionMatrix) -> Result<ActivationMap> {
    let n = map.pixels();
    if t.size != n {
        return Err(Error::shape(
            "transition matrix",
            &[n, n],
            &[t.size, t.size],
        ));
    }
    let classes = map.classes();
    let src = map.data();
    let mut out = Vec::with_capacity(src.len());
    let mut acc = vec![0.0f64; classes];
    for p in 0..n {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (q, &w) in t.row(p).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(&src[q * classes..(q + 1) * classes]) {
                *a += f64::from(w) * f64::from(v);
            }
        }
        out.extend(acc.iter().map(|&a| a as f32));
    }
    Ok(ActivationMap::from_raw(
        map.height(),
        map.width(),
        classes,
        out,
    ))
}
