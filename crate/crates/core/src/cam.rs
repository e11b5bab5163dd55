//! Class activation maps, top-k pooling, and background thresholding.
//!
//! Channel `c` of an [`ActivationMap`] belongs to foreground class `c + 1`;
//! label `0` is reserved for background and `255` for ignored pixels.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, LabelImage, Result, Tensor, BACKGROUND, IGNORE};

/// Largest foreground class count whose labels stay clear of [`IGNORE`].
pub const MAX_CLASSES: usize = 254;

/// Per-class activations on an `h × w` grid, stored `[h, w, C]`.
///
/// Freshly generated maps lie in `[0, 1]`. Refinement and propagation do not
/// renormalise, so later stages may exceed 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f32>,
}

impl ActivationMap {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        t.expect_rank("activation map", 3)?;
        let (shape, data) = t.into_parts();
        if shape[2] > MAX_CLASSES {
            return Err(Error::InvalidParameter {
                name: "class count",
                reason: "at most 254 foreground classes fit in a label map",
            });
        }
        Ok(Self {
            height: shape[0],
            width: shape[1],
            classes: shape[2],
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, classes: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * classes);
        Self {
            height,
            width,
            classes,
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.classes],
            self.data.clone(),
        )
        .expect("activation map values are finite")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, class: usize) -> f32 {
        self.data[(row * self.width + col) * self.classes + class]
    }

    /// Activations of every class at flat pixel index `p`.
    pub fn pixel(&self, p: usize) -> &[f32] {
        &self.data[p * self.classes..(p + 1) * self.classes]
    }

    /// Multiplies every activation by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Classifier weight matrix `W` of shape `[d, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    weights: Tensor,
}

impl ClassifierWeights {
    pub fn new(weights: Tensor) -> Result<Self> {
        weights.expect_rank("classifier weights", 2)?;
        if weights.shape()[1] > MAX_CLASSES {
            return Err(Error::InvalidParameter {
                name: "class count",
                reason: "at most 254 foreground classes fit in a label map",
            });
        }
        Ok(Self { weights })
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn get(&self, feature: usize, class: usize) -> f32 {
        self.weights.data()[feature * self.classes() + class]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.weights
    }
}

/// Background score `β` for single thresholding, `0 < β < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundScore(f32);

impl BackgroundScore {
    pub fn new(beta: f32) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidParameter {
                name: "beta",
                reason: "must lie strictly between 0 and 1",
            });
        }
        Ok(Self(beta))
    }

    pub fn get(self) -> f32 {
        self.0
    }
}

/// Dual background scores `0 < β_l < β_h < 1` splitting pixels into
/// foreground, background and uncertain regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundThresholds {
    low: f32,
    high: f32,
}

impl BackgroundThresholds {
    pub fn new(low: f32, high: f32) -> Result<Self> {
        if !(low > 0.0 && low < high && high < 1.0) {
            return Err(Error::ThresholdOrder { low, high });
        }
        Ok(Self { low, high })
    }

    pub fn low(self) -> f32 {
        self.low
    }

    pub fn high(self) -> f32 {
        self.high
    }
}

impl Default for BackgroundThresholds {
    fn default() -> Self {
        Self {
            low: 0.35,
            high: 0.55,
        }
    }
}

/// Averages the `⌈h·w·k/100⌉` largest values of every channel of an
/// `[h, w, d]` feature map.
///
/// `k = 100` is global average pooling. Any `k` small enough to select a
/// single element is global max pooling. The selected values are summed in
/// raster order, so `k = 100` reproduces a raster-order mean bit for bit.
pub fn top_k_pool(features: &Tensor, k_percent: f64) -> Result<Tensor> {
    features.expect_rank("features", 3)?;
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidParameter {
            name: "k",
            reason: "top-k percentage must lie in (0, 100]",
        });
    }
    let shape = features.shape();
    let (hw, d) = (shape[0] * shape[1], shape[2]);
    let count = top_k_count(hw, k_percent);
    let data = features.data();
    let mut order: Vec<usize> = Vec::with_capacity(hw);
    let mut pooled = Vec::with_capacity(d);
    for c in 0..d {
        let value = |p: usize| data[p * d + c];
        order.clear();
        order.extend(0..hw);
        order.sort_unstable_by(|&a, &b| value(b).total_cmp(&value(a)).then(a.cmp(&b)));
        let chosen = &mut order[..count];
        chosen.sort_unstable();
        let sum: f64 = chosen.iter().map(|&p| f64::from(value(p))).sum();
        pooled.push((sum / count as f64) as f32);
    }
    Tensor::new(vec![d], pooled)
}

/// Number of elements selected by top-k pooling; never zero.
pub fn top_k_count(elements: usize, k_percent: f64) -> usize {
    let raw = (elements as f64 * k_percent / 100.0).ceil() as usize;
    raw.clamp(1, elements)
}

/// Builds normalised activation maps for the classes listed in
/// `classes_present` (1-based foreground ids). Absent classes stay zero.
///
/// Each present class gets `ReLU(Σ_i W[i,c] F_i)` followed by min-max
/// normalisation over the image. A map whose range is below `1e-8` carries no
/// localisation and is zeroed.
pub fn generate_cam(
    features: &Tensor,
    weights: &ClassifierWeights,
    classes_present: &[u8],
) -> Result<ActivationMap> {
    features.expect_rank("features", 3)?;
    let shape = features.shape();
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    if d != weights.feature_dim() {
        return Err(Error::shape(
            "classifier weights",
            &[d, weights.classes()],
            weights.tensor().shape(),
        ));
    }
    if classes_present.is_empty() {
        return Err(Error::InvalidParameter {
            name: "classes_present",
            reason: "at least one class must be present",
        });
    }
    let classes = weights.classes();
    if classes_present
        .iter()
        .any(|&c| c == BACKGROUND || usize::from(c) > classes)
    {
        return Err(Error::InvalidParameter {
            name: "classes_present",
            reason: "class ids must lie in 1..=C",
        });
    }

    let hw = h * w;
    let f = features.data();
    let mut data = vec![0.0f32; hw * classes];
    let mut raw = vec![0.0f64; hw];
    for c in 0..classes {
        if !classes_present.contains(&((c + 1) as u8)) {
            continue;
        }
        for (p, r) in raw.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for i in 0..d {
                acc += f64::from(weights.get(i, c)) * f64::from(f[p * d + i]);
            }
            *r = acc.max(0.0);
        }
        let (lo, hi) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        if range <= 1e-8 {
            continue;
        }
        for (p, &r) in raw.iter().enumerate() {
            data[p * classes + c] = ((r - lo) / range) as f32;
        }
    }
    Ok(ActivationMap::from_raw(h, w, classes, data))
}

/// Index and value of the largest activation; ties go to the lowest index.
fn argmax(values: &[f32]) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best
}

/// Labels each pixel with its strongest class when that activation reaches
/// `beta`, and background otherwise.
pub fn threshold_single(map: &ActivationMap, beta: BackgroundScore) -> LabelImage {
    let labels = (0..map.pixels())
        .map(|p| match argmax(map.pixel(p)) {
            Some((c, v)) if v >= beta.get() => (c + 1) as u8,
            _ => BACKGROUND,
        })
        .collect();
    LabelImage::new(map.height, map.width, labels).expect("map dimensions are non-zero")
}

/// Splits pixels into confident foreground (max ≥ `β_h`), background
/// (max ≤ `β_l`) and ignored (everything in between).
pub fn threshold_dual(map: &ActivationMap, thresholds: BackgroundThresholds) -> LabelImage {
    let labels = (0..map.pixels())
        .map(|p| match argmax(map.pixel(p)) {
            Some((c, v)) if v >= thresholds.high => (c + 1) as u8,
            Some((_, v)) if v > thresholds.low => IGNORE,
            _ => BACKGROUND,
        })
        .collect();
    LabelImage::new(map.height, map.width, labels).expect("map dimensions are non-zero")
}
